//! The noise-predictor U-Net: a feature pyramid over the configured channel
//! multipliers with timestep conditioning in every residual block, optional
//! spatial self-attention at configured feature sizes, and skip connections
//! across matching resolutions.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::layers::{
    silu_backward, silu_forward, silu_vec_backward, silu_vec_forward, upsample2_backward,
    upsample2_forward, AttnCache, AttnSpec, ConvCache, ConvSpec, LinearSpec, NormCache, NormSpec,
    Span, SpanAlloc,
};
use super::tensor::{Matrix, Real, Tensor};
use crate::{Error, Result};

/// Architecture description for one noise predictor.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoisePredictorConfig {
    pub resolution: usize,
    pub conditional: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub inner_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub time_embedding_dim: usize,
    #[serde(default = "default_res_blocks")]
    pub res_blocks_per_level: usize,
    #[serde(default)]
    pub learned_variance: bool,
}

fn default_res_blocks() -> usize {
    1
}

impl NoisePredictorConfig {
    /// Conditional predictor over `image_channels`-channel images; the
    /// condition is concatenated channelwise, doubling the input fan-in.
    pub fn conditional(
        resolution: usize,
        image_channels: usize,
        inner_channels: usize,
        channel_multipliers: Vec<usize>,
        attention_resolutions: Vec<usize>,
    ) -> Self {
        NoisePredictorConfig {
            resolution,
            conditional: true,
            in_channels: 2 * image_channels,
            out_channels: image_channels,
            inner_channels,
            channel_multipliers,
            attention_resolutions,
            time_embedding_dim: 4 * inner_channels,
            res_blocks_per_level: 1,
            learned_variance: false,
        }
    }

    pub fn unconditional(
        resolution: usize,
        image_channels: usize,
        inner_channels: usize,
        channel_multipliers: Vec<usize>,
        attention_resolutions: Vec<usize>,
    ) -> Self {
        NoisePredictorConfig {
            resolution,
            conditional: false,
            in_channels: image_channels,
            out_channels: image_channels,
            inner_channels,
            channel_multipliers,
            attention_resolutions,
            time_embedding_dim: 4 * inner_channels,
            res_blocks_per_level: 1,
            learned_variance: false,
        }
    }

    /// Channels of the image the model denoises (the variance head, when
    /// enabled, doubles `out_channels` without changing this).
    pub fn image_channels(&self) -> usize {
        if self.learned_variance {
            self.out_channels / 2
        } else {
            self.out_channels
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.inner_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("zero-sized predictor dimension"));
        }
        if self.channel_multipliers.is_empty() {
            return Err(Error::invalid("channel_multipliers must be nonempty"));
        }
        if self.channel_multipliers.iter().any(|&m| m == 0) {
            return Err(Error::invalid("channel multipliers must be >= 1"));
        }
        if self.res_blocks_per_level == 0 {
            return Err(Error::invalid("res_blocks_per_level must be >= 1"));
        }
        let halvings = self.levels() - 1;
        if self.resolution % (1 << halvings) != 0 {
            return Err(Error::invalid(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution, halvings
            )));
        }
        let reachable: Vec<usize> = (0..self.levels()).map(|i| self.resolution >> i).collect();
        for r in &self.attention_resolutions {
            if !reachable.contains(r) {
                return Err(Error::invalid(format!(
                    "attention resolution {r} not in reachable sizes {reachable:?}"
                )));
            }
        }
        if self.learned_variance && self.out_channels % 2 != 0 {
            return Err(Error::invalid("learned variance head needs even out_channels"));
        }
        let img = self.image_channels();
        let expected_in = if self.conditional { 2 * img } else { img };
        if self.in_channels != expected_in {
            return Err(Error::invalid(format!(
                "in_channels {} inconsistent with conditional={} and image channels {}",
                self.in_channels, self.conditional, img
            )));
        }
        if self.time_embedding_dim < 2 || self.time_embedding_dim % 2 != 0 {
            return Err(Error::invalid("time_embedding_dim must be even and >= 2"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) struct ResBlockSpec {
    norm1: NormSpec,
    conv1: ConvSpec,
    time: LinearSpec,
    norm2: NormSpec,
    conv2: ConvSpec,
    skip: Option<ConvSpec>,
}

impl ResBlockSpec {
    fn new(alloc: &mut SpanAlloc, in_c: usize, out_c: usize, time_d: usize) -> Self {
        let norm1 = NormSpec::new(alloc, in_c);
        let conv1 = ConvSpec::new(alloc, in_c, out_c, 3, 1, 1);
        let time = LinearSpec::new(alloc, time_d, out_c);
        let norm2 = NormSpec::new(alloc, out_c);
        let conv2 = ConvSpec::new(alloc, out_c, out_c, 3, 1, 1);
        let skip = if in_c != out_c {
            Some(ConvSpec::new(alloc, in_c, out_c, 1, 1, 0))
        } else {
            None
        };
        ResBlockSpec { norm1, conv1, time, norm2, conv2, skip }
    }

    fn init<T: Real>(&self, params: &mut [T], rng: &mut ChaCha12Rng) {
        self.norm1.init(params);
        self.conv1.init(params, rng, 1.0);
        self.time.init(params, rng, 1.0);
        self.norm2.init(params);
        self.conv2.init(params, rng, 0.2);
        if let Some(s) = &self.skip {
            s.init(params, rng, 1.0);
        }
    }

    fn param_spans(&self) -> Vec<(&'static str, Span)> {
        let mut v = vec![
            ("norm", self.norm1.gamma),
            ("norm", self.norm1.beta),
            ("conv", self.conv1.w),
            ("conv", self.conv1.b),
            ("time_proj", self.time.w),
            ("time_proj", self.time.b),
            ("norm", self.norm2.gamma),
            ("norm", self.norm2.beta),
            ("conv", self.conv2.w),
            ("conv", self.conv2.b),
        ];
        if let Some(s) = &self.skip {
            v.push(("conv", s.w));
            v.push(("conv", s.b));
        }
        v
    }
}

struct ResCache<T: Real> {
    x: Tensor<T>,
    pre1: Tensor<T>,
    act1: Tensor<T>,
    conv1: ConvCache<T>,
    norm1: NormCache<T>,
    h: Tensor<T>,
    pre2: Tensor<T>,
    act2: Tensor<T>,
    conv2: ConvCache<T>,
    norm2: NormCache<T>,
    skip: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct DownLevel {
    blocks: Vec<ResBlockSpec>,
    attn: Option<AttnSpec>,
    down: Option<ConvSpec>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    blocks: Vec<ResBlockSpec>,
    attn: Option<AttnSpec>,
    /// Convolution applied after nearest-neighbor upsampling into this level
    /// from below; `None` at the deepest level.
    upconv: Option<ConvSpec>,
}

#[derive(Debug, Clone)]
pub(crate) struct UNetLayout {
    time_l1: LinearSpec,
    time_l2: LinearSpec,
    conv_in: ConvSpec,
    down: Vec<DownLevel>,
    mid1: ResBlockSpec,
    mid_attn: Option<AttnSpec>,
    mid2: ResBlockSpec,
    up: Vec<UpLevel>,
    norm_out: NormSpec,
    conv_out: ConvSpec,
    total: usize,
}

impl UNetLayout {
    pub(crate) fn build(cfg: &NoisePredictorConfig) -> Result<UNetLayout> {
        cfg.validate()?;
        let mut alloc = SpanAlloc::default();
        let levels = cfg.levels();
        let chans: Vec<usize> = cfg.channel_multipliers.iter().map(|m| m * cfg.inner_channels).collect();
        let sizes: Vec<usize> = (0..levels).map(|i| cfg.resolution >> i).collect();
        let td = cfg.time_embedding_dim;

        let time_l1 = LinearSpec::new(&mut alloc, td, td);
        let time_l2 = LinearSpec::new(&mut alloc, td, td);
        let conv_in = ConvSpec::new(&mut alloc, cfg.in_channels, chans[0], 3, 1, 1);

        let mut down = Vec::with_capacity(levels);
        for i in 0..levels {
            let in_c = if i == 0 { chans[0] } else { chans[i - 1] };
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks_per_level {
                let bin = if b == 0 { in_c } else { chans[i] };
                blocks.push(ResBlockSpec::new(&mut alloc, bin, chans[i], td));
            }
            let attn = cfg
                .attention_resolutions
                .contains(&sizes[i])
                .then(|| AttnSpec::new(&mut alloc, chans[i]));
            let down_conv = (i + 1 < levels).then(|| ConvSpec::new(&mut alloc, chans[i], chans[i], 3, 2, 1));
            down.push(DownLevel { blocks, attn, down: down_conv });
        }

        let deep = *chans.last().expect("nonempty multipliers");
        let mid1 = ResBlockSpec::new(&mut alloc, deep, deep, td);
        let mid_attn = cfg
            .attention_resolutions
            .contains(sizes.last().expect("nonempty"))
            .then(|| AttnSpec::new(&mut alloc, deep));
        let mid2 = ResBlockSpec::new(&mut alloc, deep, deep, td);

        let mut up = Vec::with_capacity(levels);
        for i in 0..levels {
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks_per_level {
                let bin = if b == 0 { 2 * chans[i] } else { chans[i] };
                blocks.push(ResBlockSpec::new(&mut alloc, bin, chans[i], td));
            }
            let attn = cfg
                .attention_resolutions
                .contains(&sizes[i])
                .then(|| AttnSpec::new(&mut alloc, chans[i]));
            let upconv = (i > 0).then(|| ConvSpec::new(&mut alloc, chans[i], chans[i - 1], 3, 1, 1));
            up.push(UpLevel { blocks, attn, upconv });
        }

        let norm_out = NormSpec::new(&mut alloc, chans[0]);
        let conv_out = ConvSpec::new(&mut alloc, chans[0], cfg.out_channels, 3, 1, 1);

        Ok(UNetLayout {
            time_l1,
            time_l2,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out,
            conv_out,
            total: alloc.total(),
        })
    }

    pub(crate) fn total_params(&self) -> usize {
        self.total
    }

    fn init<T: Real>(&self, params: &mut [T], seed: u64) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        self.time_l1.init(params, &mut rng, 1.0);
        self.time_l2.init(params, &mut rng, 1.0);
        self.conv_in.init(params, &mut rng, 1.0);
        for lvl in &self.down {
            for b in &lvl.blocks {
                b.init(params, &mut rng);
            }
            if let Some(a) = &lvl.attn {
                a.init(params, &mut rng);
            }
            if let Some(d) = &lvl.down {
                d.init(params, &mut rng, 1.0);
            }
        }
        self.mid1.init(params, &mut rng);
        if let Some(a) = &self.mid_attn {
            a.init(params, &mut rng);
        }
        self.mid2.init(params, &mut rng);
        for lvl in &self.up {
            for b in &lvl.blocks {
                b.init(params, &mut rng);
            }
            if let Some(a) = &lvl.attn {
                a.init(params, &mut rng);
            }
            if let Some(u) = &lvl.upconv {
                u.init(params, &mut rng, 1.0);
            }
        }
        self.norm_out.init(params);
        self.conv_out.init(params, &mut rng, 0.1);
    }

    /// Parameter spans grouped by block kind, for the gradient-check harness.
    pub(crate) fn spans_by_kind(&self) -> Vec<(&'static str, Span)> {
        let mut v = Vec::new();
        v.push(("time_proj", self.time_l1.w));
        v.push(("time_proj", self.time_l1.b));
        v.push(("time_proj", self.time_l2.w));
        v.push(("time_proj", self.time_l2.b));
        v.push(("conv", self.conv_in.w));
        v.push(("conv", self.conv_in.b));
        let push_attn = |v: &mut Vec<(&'static str, Span)>, a: &AttnSpec| {
            v.push(("norm", a.norm.gamma));
            v.push(("norm", a.norm.beta));
            for c in [&a.wq, &a.wk, &a.wv, &a.wproj] {
                v.push(("attention", c.w));
                v.push(("attention", c.b));
            }
        };
        for lvl in &self.down {
            for b in &lvl.blocks {
                v.extend(b.param_spans());
            }
            if let Some(a) = &lvl.attn {
                push_attn(&mut v, a);
            }
            if let Some(d) = &lvl.down {
                v.push(("conv", d.w));
                v.push(("conv", d.b));
            }
        }
        v.extend(self.mid1.param_spans());
        if let Some(a) = &self.mid_attn {
            push_attn(&mut v, a);
        }
        v.extend(self.mid2.param_spans());
        for lvl in &self.up {
            for b in &lvl.blocks {
                v.extend(b.param_spans());
            }
            if let Some(a) = &lvl.attn {
                push_attn(&mut v, a);
            }
            if let Some(u) = &lvl.upconv {
                v.push(("conv", u.w));
                v.push(("conv", u.b));
            }
        }
        v.push(("norm", self.norm_out.gamma));
        v.push(("norm", self.norm_out.beta));
        v.push(("conv", self.conv_out.w));
        v.push(("conv", self.conv_out.b));
        v
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct LevelCache<T: Real> {
    blocks: Vec<ResCache<T>>,
    attn: Option<AttnCache<T>>,
    /// Resampling convolution cache plus its input: the level output for
    /// down levels, the nearest-upsampled tensor for up levels.
    resize: Option<(Tensor<T>, ConvCache<T>)>,
}

pub(crate) struct UNetCache<T: Real> {
    sin: Matrix<T>,
    e1: Matrix<T>,
    s1: Matrix<T>,
    emb: Matrix<T>,
    silu_emb: Matrix<T>,
    input: Tensor<T>,
    conv_in: ConvCache<T>,
    down: Vec<LevelCache<T>>,
    mid1: ResCache<T>,
    mid_attn: Option<AttnCache<T>>,
    mid2: ResCache<T>,
    up: Vec<LevelCache<T>>,
    /// Channel count arriving from below at each up level, for splitting the
    /// concatenated gradient.
    below_channels: Vec<usize>,
    norm_out: NormCache<T>,
    final_in: Tensor<T>,
    final_normed: Tensor<T>,
    final_act: Tensor<T>,
    conv_out: ConvCache<T>,
}

/// Sinusoidal position encoding for a batch of timesteps.
fn sinusoid<T: Real>(ts: &[usize], dim: usize) -> Matrix<T> {
    let half = dim / 2;
    let mut m = Matrix::zeros(dim, ts.len());
    for (s, &t) in ts.iter().enumerate() {
        for j in 0..half {
            let exponent = if half > 1 { j as f64 / (half - 1) as f64 } else { 0.0 };
            let freq = (-(10000.0f64.ln()) * exponent).exp();
            let angle = t as f64 * freq;
            m.data[j * ts.len() + s] = T::from_f64(angle.sin());
            m.data[(half + j) * ts.len() + s] = T::from_f64(angle.cos());
        }
    }
    m
}

fn res_forward<T: Real>(
    spec: &ResBlockSpec,
    params: &[T],
    x: Tensor<T>,
    silu_emb: &Matrix<T>,
) -> (Tensor<T>, ResCache<T>) {
    let (pre1, norm1) = spec.norm1.forward(params, &x);
    let act1 = silu_forward(&pre1);
    let (mut h, conv1) = spec.conv1.forward(params, &act1);
    // per-sample, per-channel time bias
    let tb = spec.time.forward(params, silu_emb);
    let plane = h.plane();
    let bs = h.batch;
    for c in 0..h.channels {
        let row = h.row_mut(c);
        for s in 0..bs {
            let bias = tb.data[c * bs + s];
            for v in &mut row[s * plane..(s + 1) * plane] {
                *v += bias;
            }
        }
    }
    let (pre2, norm2) = spec.norm2.forward(params, &h);
    let act2 = silu_forward(&pre2);
    let (mut y, conv2) = spec.conv2.forward(params, &act2);
    let skip = match &spec.skip {
        Some(sc) => {
            let (sv, scache) = sc.forward(params, &x);
            y.add_inplace(&sv);
            Some(scache)
        }
        None => {
            y.add_inplace(&x);
            None
        }
    };
    (y, ResCache { x, pre1, act1, conv1, norm1, h, pre2, act2, conv2, norm2, skip })
}

#[allow(clippy::too_many_arguments)]
fn res_backward<T: Real>(
    spec: &ResBlockSpec,
    params: &[T],
    silu_emb: &Matrix<T>,
    cache: &ResCache<T>,
    dy: &Tensor<T>,
    grad: &mut [T],
    d_silu_emb: &mut Matrix<T>,
) -> Tensor<T> {
    let x = &cache.x;
    let d_act2 = spec.conv2.backward(params, &cache.act2, &cache.conv2, dy, grad);
    let d_pre2 = silu_backward(&cache.pre2, &d_act2);
    let d_h = spec.norm2.backward(params, &cache.h, &cache.norm2, &d_pre2, grad);

    // time-bias gradient: sum over each sample's plane
    let bs = d_h.batch;
    let plane = d_h.plane();
    let mut d_tb = Matrix::zeros(d_h.channels, bs);
    for c in 0..d_h.channels {
        let row = d_h.row(c);
        for s in 0..bs {
            let mut acc = T::ZERO;
            for v in &row[s * plane..(s + 1) * plane] {
                acc += *v;
            }
            d_tb.data[c * bs + s] = acc;
        }
    }
    let d_emb_part = spec.time.backward(params, silu_emb, &d_tb, grad);
    for (a, b) in d_silu_emb.data.iter_mut().zip(&d_emb_part.data) {
        *a += *b;
    }

    let d_act1 = spec.conv1.backward(params, &cache.act1, &cache.conv1, &d_h, grad);
    let d_pre1 = silu_backward(&cache.pre1, &d_act1);
    let mut dx = spec.norm1.backward(params, x, &cache.norm1, &d_pre1, grad);
    match (&spec.skip, &cache.skip) {
        (Some(sc), Some(scache)) => {
            dx.add_inplace(&sc.backward(params, x, scache, dy, grad));
        }
        _ => dx.add_inplace(dy),
    }
    dx
}

impl UNetLayout {
    fn embed<T: Real>(&self, params: &[T], ts: &[usize]) -> (Matrix<T>, Matrix<T>, Matrix<T>, Matrix<T>, Matrix<T>) {
        let td = self.time_l1.in_d;
        let sin = sinusoid::<T>(ts, td);
        let e1 = self.time_l1.forward(params, &sin);
        let s1 = Matrix { rows: e1.rows, cols: e1.cols, data: silu_vec_forward(&e1.data) };
        let emb = self.time_l2.forward(params, &s1);
        let silu_emb = Matrix { rows: emb.rows, cols: emb.cols, data: silu_vec_forward(&emb.data) };
        (sin, e1, s1, emb, silu_emb)
    }

    pub(crate) fn forward<T: Real>(
        &self,
        params: &[T],
        input: &Tensor<T>,
        ts: &[usize],
    ) -> (Tensor<T>, UNetCache<T>) {
        debug_assert_eq!(input.batch, ts.len());
        let (sin, e1, s1, emb, silu_emb) = self.embed(params, ts);

        let (mut h, conv_in) = self.conv_in.forward(params, input);

        let mut down_caches = Vec::with_capacity(self.down.len());
        let mut skips = Vec::with_capacity(self.down.len());
        for lvl in &self.down {
            let mut blocks = Vec::new();
            for b in &lvl.blocks {
                let (y, c) = res_forward(b, params, h, &silu_emb);
                blocks.push(c);
                h = y;
            }
            let attn = match &lvl.attn {
                Some(a) => {
                    let (y, c) = a.forward(params, h);
                    h = y;
                    Some(c)
                }
                None => None,
            };
            skips.push(h.clone());
            let resize = match &lvl.down {
                Some(dconv) => {
                    let (y, c) = dconv.forward(params, &h);
                    let prev = std::mem::replace(&mut h, y);
                    Some((prev, c))
                }
                None => None,
            };
            down_caches.push(LevelCache { blocks, attn, resize });
        }

        let (h1, mid1) = res_forward(&self.mid1, params, h, &silu_emb);
        let (h2, mid_attn) = match &self.mid_attn {
            Some(a) => {
                let (y, c) = a.forward(params, h1);
                (y, Some(c))
            }
            None => (h1, None),
        };
        let (h3, mid2) = res_forward(&self.mid2, params, h2, &silu_emb);
        h = h3;

        let mut up_caches: Vec<LevelCache<T>> = Vec::with_capacity(self.up.len());
        let mut below_channels: Vec<usize> = vec![0; self.up.len()];
        for i in (0..self.up.len()).rev() {
            let lvl = &self.up[i];
            below_channels[i] = h.channels;
            let mut x = h.concat_channels(&skips[i]);
            let mut blocks = Vec::new();
            for b in &lvl.blocks {
                let (y, c) = res_forward(b, params, x, &silu_emb);
                blocks.push(c);
                x = y;
            }
            let attn = match &lvl.attn {
                Some(a) => {
                    let (y, c) = a.forward(params, x);
                    x = y;
                    Some(c)
                }
                None => None,
            };
            let resize = match &lvl.upconv {
                Some(uconv) => {
                    let us = upsample2_forward(&x);
                    let (y, c) = uconv.forward(params, &us);
                    x = y;
                    Some((us, c))
                }
                None => None,
            };
            h = x;
            up_caches.push(LevelCache { blocks, attn, resize });
        }

        let final_in = h;
        let (final_normed, norm_out) = self.norm_out.forward(params, &final_in);
        let final_act = silu_forward(&final_normed);
        let (out, conv_out) = self.conv_out.forward(params, &final_act);

        let cache = UNetCache {
            sin,
            e1,
            s1,
            emb,
            silu_emb,
            input: input.clone(),
            conv_in,
            down: down_caches,
            mid1,
            mid_attn,
            mid2,
            up: up_caches,
            below_channels,
            norm_out,
            final_in,
            final_normed,
            final_act,
            conv_out,
        };
        (out, cache)
    }

    /// Inference pass that drops intermediate caches eagerly to keep the
    /// footprint small for large sampling batches.
    pub(crate) fn forward_infer<T: Real>(&self, params: &[T], input: &Tensor<T>, ts: &[usize]) -> Tensor<T> {
        let (_, _, _, _, silu_emb) = self.embed(params, ts);

        let mut h = self.conv_in.forward(params, input).0;
        let mut skips = Vec::with_capacity(self.down.len());
        for lvl in &self.down {
            for b in &lvl.blocks {
                h = res_forward(b, params, h, &silu_emb).0;
            }
            if let Some(a) = &lvl.attn {
                h = a.forward(params, h).0;
            }
            skips.push(h.clone());
            if let Some(d) = &lvl.down {
                h = d.forward(params, &h).0;
            }
        }
        h = res_forward(&self.mid1, params, h, &silu_emb).0;
        if let Some(a) = &self.mid_attn {
            h = a.forward(params, h).0;
        }
        h = res_forward(&self.mid2, params, h, &silu_emb).0;
        for i in (0..self.up.len()).rev() {
            let lvl = &self.up[i];
            let mut x = h.concat_channels(&skips[i]);
            for b in &lvl.blocks {
                x = res_forward(b, params, x, &silu_emb).0;
            }
            if let Some(a) = &lvl.attn {
                x = a.forward(params, x).0;
            }
            if let Some(u) = &lvl.upconv {
                x = u.forward(params, &upsample2_forward(&x)).0;
            }
            h = x;
        }
        let normed = self.norm_out.forward(params, &h).0;
        let act = silu_forward(&normed);
        self.conv_out.forward(params, &act).0
    }

    pub(crate) fn backward<T: Real>(
        &self,
        params: &[T],
        cache: &UNetCache<T>,
        d_out: &Tensor<T>,
        grad: &mut [T],
    ) {
        let mut d_silu_emb = Matrix::zeros(cache.silu_emb.rows, cache.silu_emb.cols);

        let d_final_act = self.conv_out.backward(params, &cache.final_act, &cache.conv_out, d_out, grad);
        let d_final_normed = silu_backward(&cache.final_normed, &d_final_act);
        let mut dh = self
            .norm_out
            .backward(params, &cache.final_in, &cache.norm_out, &d_final_normed, grad);

        // forward ran the up path from the deepest level to level 0, so the
        // backward sweep unwinds level 0 first; cache entries were pushed in
        // forward order (deepest first)
        let mut d_skips: Vec<Option<Tensor<T>>> = vec![None; self.up.len()];
        for i in 0..self.up.len() {
            let ci = self.up.len() - 1 - i;
            let lvl = &self.up[i];
            let lc = &cache.up[ci];
            if let (Some(uconv), Some((us, rc))) = (&lvl.upconv, &lc.resize) {
                let d_us = uconv.backward(params, us, rc, &dh, grad);
                dh = upsample2_backward(&d_us);
            }
            if let (Some(a), Some(ac)) = (&lvl.attn, &lc.attn) {
                dh = a.backward(params, ac, &dh, grad);
            }
            for (b, bc) in lvl.blocks.iter().zip(lc.blocks.iter()).rev() {
                dh = res_backward(b, params, &cache.silu_emb, bc, &dh, grad, &mut d_silu_emb);
            }
            // split concat gradient into (from below, skip)
            let (d_below, d_skip) = dh.split_channels(cache.below_channels[i]);
            d_skips[i] = Some(d_skip);
            dh = d_below;
        }

        dh = {
            let d = res_backward(&self.mid2, params, &cache.silu_emb, &cache.mid2, &dh, grad, &mut d_silu_emb);
            let d = match (&self.mid_attn, &cache.mid_attn) {
                (Some(a), Some(ac)) => a.backward(params, ac, &d, grad),
                _ => d,
            };
            res_backward(&self.mid1, params, &cache.silu_emb, &cache.mid1, &d, grad, &mut d_silu_emb)
        };

        for i in (0..self.down.len()).rev() {
            let lvl = &self.down[i];
            let lc = &cache.down[i];
            if let (Some(dconv), Some((ri, rc))) = (&lvl.down, &lc.resize) {
                dh = dconv.backward(params, ri, rc, &dh, grad);
            }
            if let Some(ds) = d_skips[i].take() {
                dh.add_inplace(&ds);
            }
            if let (Some(a), Some(ac)) = (&lvl.attn, &lc.attn) {
                dh = a.backward(params, ac, &dh, grad);
            }
            for (b, bc) in lvl.blocks.iter().zip(lc.blocks.iter()).rev() {
                dh = res_backward(b, params, &cache.silu_emb, bc, &dh, grad, &mut d_silu_emb);
            }
        }

        let _d_input = self.conv_in.backward(params, &cache.input, &cache.conv_in, &dh, grad);

        // time-embedding path
        let d_emb = Matrix {
            rows: cache.emb.rows,
            cols: cache.emb.cols,
            data: silu_vec_backward(&cache.emb.data, &d_silu_emb.data),
        };
        let d_s1 = self.time_l2.backward(params, &cache.s1, &d_emb, grad);
        let d_e1 = Matrix {
            rows: cache.e1.rows,
            cols: cache.e1.cols,
            data: silu_vec_backward(&cache.e1.data, &d_s1.data),
        };
        let _d_sin = self.time_l1.backward(params, &cache.sin, &d_e1, grad);
    }

    pub(crate) fn init_params<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut params = vec![T::ZERO; self.total];
        self.init(&mut params, seed);
        params
    }
}
