//! The trainable noise predictor and its training step.
//!
//! Three instances are used by the pipeline: a conditional low-resolution
//! model, a conditional super-resolution model, and an unconditional
//! texture model. All share one architecture family configured by
//! [`NoisePredictorConfig`].
//!
//! The network is generic over its scalar type: `f32` is the working
//! precision, `f64` backs the finite-difference gradient harness.

pub mod layers;
pub mod tensor;
mod unet;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::diffusion::{forward_marginal, gaussian_image, LossKind};
use crate::image::ImageTensor;
use crate::schedule::VarianceSchedule;
use crate::{Error, Result};

pub use tensor::{Matrix, Real, Tensor};

/// Raw GEMM shims exposed for throughput probing in the test suite.
pub mod gemm_probe {
    use super::tensor;
    pub fn a_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        tensor::gemm_a_bt_accum(m, k, n, a, b, c);
    }
    pub fn at_b(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        tensor::gemm_at_b_accum(m, k, n, a, b, c);
    }
}
pub use unet::NoisePredictorConfig;

pub(crate) use unet::UNetLayout;

/// Anything that can stand in for the trained noise estimator during
/// sampling: real models, or exact-noise oracles in tests.
pub trait EpsModel {
    fn resolution(&self) -> usize;
    fn conditional(&self) -> bool;
    fn image_channels(&self) -> usize;

    fn predict(&self, y_t: &ImageTensor, t: usize, cond: Option<&ImageTensor>) -> Result<ImageTensor>;

    /// Batched prediction with one shared timestep. The default loops over
    /// [`EpsModel::predict`]; real models override with a batched pass.
    fn predict_batch(
        &self,
        y_ts: &[ImageTensor],
        t: usize,
        conds: Option<&[ImageTensor]>,
    ) -> Result<Vec<ImageTensor>> {
        y_ts.iter()
            .enumerate()
            .map(|(i, y)| self.predict(y, t, conds.map(|c| &c[i])))
            .collect()
    }
}

/// A built noise predictor: immutable during inference, mutated only through
/// [`TrainState`].
#[derive(Debug, Clone)]
pub struct NoisePredictor<T: Real = f32> {
    config: NoisePredictorConfig,
    layout: UNetLayout,
    params: Vec<T>,
}

impl<T: Real> NoisePredictor<T> {
    /// Deterministic construction: two builds with the same seed produce
    /// bit-identical parameter vectors.
    pub fn build(config: NoisePredictorConfig, seed: u64) -> Result<Self> {
        let layout = UNetLayout::build(&config)?;
        let params = layout.init_params::<T>(seed);
        Ok(NoisePredictor { config, layout, params })
    }

    /// Parameter count as a pure function of the configuration; no
    /// parameters are allocated.
    pub fn param_count_for(config: &NoisePredictorConfig) -> Result<usize> {
        Ok(UNetLayout::build(config)?.total_params())
    }

    pub fn config(&self) -> &NoisePredictorConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Replace the parameter vector (checkpoint restore).
    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.layout.total_params() {
            return Err(Error::invalid(format!(
                "parameter count mismatch: layout wants {}, got {}",
                self.layout.total_params(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Parameter spans grouped by block kind (used by the gradient harness).
    pub fn param_spans_by_kind(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        self.layout
            .spans_by_kind()
            .into_iter()
            .map(|(k, s)| (k, s.off..s.off + s.len))
            .collect()
    }

    fn check_inputs(&self, y_t: &ImageTensor, cond: Option<&ImageTensor>) -> Result<()> {
        let res = self.config.resolution;
        let img_c = self.config.image_channels();
        if y_t.height() != res || y_t.width() != res || y_t.channels() != img_c {
            return Err(Error::shape(
                format!("{img_c}x{res}x{res}"),
                y_t.shape_string(),
            ));
        }
        match (self.config.conditional, cond) {
            (true, Some(c)) => {
                if c.height() != res || c.width() != res || c.channels() != img_c {
                    return Err(Error::shape(format!("{img_c}x{res}x{res} condition"), c.shape_string()));
                }
                Ok(())
            }
            (false, None) => Ok(()),
            (true, None) => Err(Error::invalid("conditional model called without condition")),
            (false, Some(_)) => Err(Error::invalid("unconditional model called with condition")),
        }
    }

    fn batch_to_tensor(&self, y_ts: &[&ImageTensor], conds: Option<&[&ImageTensor]>) -> Tensor<T> {
        let res = self.config.resolution;
        let img_c = self.config.image_channels();
        let in_c = self.config.in_channels;
        let bs = y_ts.len();
        let plane = res * res;
        let mut x = Tensor::zeros(in_c, bs, res, res);
        let cols = x.cols();
        for (s, y) in y_ts.iter().enumerate() {
            for c in 0..img_c {
                let src = y.plane(c);
                let dst = &mut x.data[c * cols + s * plane..c * cols + (s + 1) * plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = T::from_f64(v);
                }
            }
        }
        if let Some(conds) = conds {
            for (s, cimg) in conds.iter().enumerate() {
                for c in 0..img_c {
                    let src = cimg.plane(c);
                    let row = img_c + c;
                    let dst = &mut x.data[row * cols + s * plane..row * cols + (s + 1) * plane];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = T::from_f64(v);
                    }
                }
            }
        }
        x
    }

    fn tensor_to_images(&self, out: &Tensor<T>) -> Vec<ImageTensor> {
        let img_c = self.config.image_channels();
        let plane = out.plane();
        let cols = out.cols();
        (0..out.batch)
            .map(|s| {
                let mut data = Vec::with_capacity(img_c * plane);
                for c in 0..img_c {
                    data.extend(
                        out.data[c * cols + s * plane..c * cols + (s + 1) * plane]
                            .iter()
                            .map(|v| v.to_f64()),
                    );
                }
                ImageTensor::from_vec(img_c, out.height, out.width, data)
                    .expect("finite network output")
            })
            .collect()
    }

    /// Loss of the noise head against explicit per-item noise targets, with
    /// the parameter gradient when requested. Pure: no optimizer state, no
    /// internal randomness. This is the functional core of `train_step` and
    /// of the finite-difference gradient harness.
    pub fn loss_and_grad(
        &self,
        noisy: &[ImageTensor],
        conds: Option<&[ImageTensor]>,
        ts: &[usize],
        targets: &[ImageTensor],
        kind: LossKind,
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<T>>)> {
        if noisy.is_empty() || noisy.len() != ts.len() || noisy.len() != targets.len() {
            return Err(Error::invalid("batch arrays must be nonempty and of equal length"));
        }
        for (i, y) in noisy.iter().enumerate() {
            self.check_inputs(y, conds.map(|c| &c[i]))?;
        }
        let noisy_refs: Vec<&ImageTensor> = noisy.iter().collect();
        let cond_refs: Option<Vec<&ImageTensor>> = conds.map(|c| c.iter().collect());
        let input = self.batch_to_tensor(&noisy_refs, cond_refs.as_deref());

        let img_c = self.config.image_channels();
        let res = self.config.resolution;
        let plane = res * res;
        let n_loss = (img_c * plane * noisy.len()) as f64;
        let inv_n = T::from_f64(1.0 / n_loss);
        let two = T::from_f64(2.0);

        let (out, cache) = if want_grad {
            let (o, c) = self.layout.forward(&self.params, &input, ts);
            (o, Some(c))
        } else {
            (self.layout.forward_infer(&self.params, &input, ts), None)
        };

        // loss over the noise head only; a learned-variance head receives no
        // gradient from the epsilon objective
        let cols = out.cols();
        let mut d_out = Tensor::zeros(out.channels, out.batch, out.height, out.width);
        let mut loss_acc = 0.0f64;
        for (s, target_img) in targets.iter().enumerate() {
            for c in 0..img_c {
                let target = target_img.plane(c);
                let off = c * cols + s * plane;
                for i in 0..plane {
                    let d = out.data[off + i] - T::from_f64(target[i]);
                    match kind {
                        LossKind::L1 => {
                            loss_acc += d.abs().to_f64();
                            d_out.data[off + i] = if d >= T::ZERO { inv_n } else { -inv_n };
                        }
                        LossKind::L2 => {
                            loss_acc += (d * d).to_f64();
                            d_out.data[off + i] = two * d * inv_n;
                        }
                    }
                }
            }
        }
        let loss = loss_acc / n_loss;

        let grad = match cache {
            Some(cache) => {
                let mut grad = vec![T::ZERO; self.param_count()];
                self.layout.backward(&self.params, &cache, &d_out, &mut grad);
                Some(grad)
            }
            None => None,
        };
        Ok((loss, grad))
    }
}

impl<T: Real> EpsModel for NoisePredictor<T> {
    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn conditional(&self) -> bool {
        self.config.conditional
    }

    fn image_channels(&self) -> usize {
        self.config.image_channels()
    }

    fn predict(&self, y_t: &ImageTensor, t: usize, cond: Option<&ImageTensor>) -> Result<ImageTensor> {
        self.check_inputs(y_t, cond)?;
        let x = self.batch_to_tensor(&[y_t], cond.map(|c| vec![c]).as_deref());
        let out = self.layout.forward_infer(&self.params, &x, &[t]);
        if !out.data.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite prediction"));
        }
        let noise = if self.config.learned_variance {
            out.split_channels(self.config.image_channels()).0
        } else {
            out
        };
        Ok(self.tensor_to_images(&noise).remove(0))
    }

    fn predict_batch(
        &self,
        y_ts: &[ImageTensor],
        t: usize,
        conds: Option<&[ImageTensor]>,
    ) -> Result<Vec<ImageTensor>> {
        if y_ts.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(cs) = conds {
            if cs.len() != y_ts.len() {
                return Err(Error::invalid("condition batch length mismatch"));
            }
        }
        for (i, y) in y_ts.iter().enumerate() {
            self.check_inputs(y, conds.map(|c| &c[i]))?;
        }
        let refs: Vec<&ImageTensor> = y_ts.iter().collect();
        let cond_refs: Option<Vec<&ImageTensor>> = conds.map(|c| c.iter().collect());
        let x = self.batch_to_tensor(&refs, cond_refs.as_deref());
        let ts = vec![t; y_ts.len()];
        let out = self.layout.forward_infer(&self.params, &x, &ts);
        let noise = if self.config.learned_variance {
            out.split_channels(self.config.image_channels()).0
        } else {
            out
        };
        Ok(self.tensor_to_images(&noise))
    }
}

/// Noise prediction plus the optional learned log-variance head. When the
/// head is disabled the second element is `None`.
pub fn predict_noise_and_logvar<T: Real>(
    model: &NoisePredictor<T>,
    y_t: &ImageTensor,
    t: usize,
    cond: Option<&ImageTensor>,
) -> Result<(ImageTensor, Option<ImageTensor>)> {
    model.check_inputs(y_t, cond)?;
    let x = model.batch_to_tensor(&[y_t], cond.map(|c| vec![c]).as_deref());
    let out = model.layout.forward_infer(&model.params, &x, &[t]);
    if model.config.learned_variance {
        let (noise, logvar) = out.split_channels(model.config.image_channels());
        Ok((
            model.tensor_to_images(&noise).remove(0),
            Some(model.tensor_to_images(&logvar).remove(0)),
        ))
    } else {
        Ok((model.tensor_to_images(&out).remove(0), None))
    }
}

// ---------------------------------------------------------------------------
// Optimizer and training
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub hp: AdamParams,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize, hp: AdamParams) -> Self {
        Adam { hp, m: vec![T::ZERO; n], v: vec![T::ZERO; n], t: 0 }
    }

    pub fn update(&mut self, params: &mut [T], grad: &[T]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let b1 = T::from_f64(self.hp.beta1);
        let b2 = T::from_f64(self.hp.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.hp.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.hp.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - self.hp.beta1.powi(self.t as i32)));
        let corr2 = T::from_f64(1.0 / (1.0 - self.hp.beta2.powi(self.t as i32)));
        let lr = T::from_f64(self.hp.lr);
        let eps = T::from_f64(self.hp.eps);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + one_m_b1 * g;
            self.v[i] = b2 * self.v[i] + one_m_b2 * g * g;
            let mhat = self.m[i] * corr1;
            let vhat = self.v[i] * corr2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// One training item: the clean target image, with its condition when the
/// model is conditional.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub target: ImageTensor,
    pub cond: Option<ImageTensor>,
}

/// Mutable training state: exactly one writer at a time.
#[derive(Debug, Clone)]
pub struct TrainState<T: Real = f32> {
    model: NoisePredictor<T>,
    schedule: VarianceSchedule,
    loss_kind: LossKind,
    opt: Adam<T>,
    step: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(
        model: NoisePredictor<T>,
        schedule: VarianceSchedule,
        loss_kind: LossKind,
        hp: AdamParams,
    ) -> Self {
        let n = model.param_count();
        TrainState { model, schedule, loss_kind, opt: Adam::new(n, hp), step: 0 }
    }

    /// Reassemble a state from checkpointed parts.
    pub fn from_parts(
        model: NoisePredictor<T>,
        schedule: VarianceSchedule,
        loss_kind: LossKind,
        opt: Adam<T>,
        step: u64,
    ) -> Self {
        TrainState { model, schedule, loss_kind, opt, step }
    }

    pub fn model(&self) -> &NoisePredictor<T> {
        &self.model
    }

    pub fn into_model(self) -> NoisePredictor<T> {
        self.model
    }

    pub fn schedule(&self) -> &VarianceSchedule {
        &self.schedule
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss_kind
    }

    pub fn optimizer(&self) -> &Adam<T> {
        &self.opt
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One optimizer update over a batch: draw `t` uniform in `1..=T` and
    /// unit noise per item, form the noisy image through the closed-form
    /// marginal, predict, and descend on the configured loss. Returns the
    /// batch loss.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &[TrainItem], rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        let t_max = self.schedule.t_max();
        let img_c = self.model.config.image_channels();
        let res = self.model.config.resolution;

        let mut ts = Vec::with_capacity(batch.len());
        let mut noisy = Vec::with_capacity(batch.len());
        let mut eps_all = Vec::with_capacity(batch.len());
        for item in batch {
            if item.target.channels() != img_c || item.target.height() != res || item.target.width() != res {
                return Err(Error::shape(format!("{img_c}x{res}x{res}"), item.target.shape_string()));
            }
            if self.model.config.conditional != item.cond.is_some() {
                return Err(Error::invalid("batch conditionality does not match model"));
            }
            let t = rng.gen_range(1..=t_max);
            let eps = gaussian_image(rng, img_c, res, res);
            let y_t = forward_marginal(&item.target, t, &eps, &self.schedule)?;
            ts.push(t);
            noisy.push(y_t);
            eps_all.push(eps);
        }

        let conds: Option<Vec<ImageTensor>> = if self.model.config.conditional {
            Some(batch.iter().map(|i| i.cond.clone().expect("checked above")).collect())
        } else {
            None
        };
        let (loss, grad) = self
            .model
            .loss_and_grad(&noisy, conds.as_deref(), &ts, &eps_all, self.loss_kind, true)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, detail: format!("batch loss {loss}") });
        }
        self.opt.update(&mut self.model.params, &grad.expect("grad requested"));
        self.step += 1;
        Ok(loss)
    }
}

/// Convenience: seeded deterministic rng for training and sampling.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    use rand::SeedableRng;
    ChaCha12Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> NoisePredictorConfig {
        NoisePredictorConfig {
            resolution: 16,
            conditional: false,
            in_channels: 1,
            out_channels: 1,
            inner_channels: 8,
            channel_multipliers: vec![1, 2],
            attention_resolutions: vec![],
            time_embedding_dim: 16,
            res_blocks_per_level: 1,
            learned_variance: false,
        }
    }

    #[test]
    fn toy_model_maps_shape_contract() {
        let model: NoisePredictor<f32> = NoisePredictor::build(toy_cfg(), 0).unwrap();
        let x = ImageTensor::zeros(1, 16, 16);
        let out = model.predict(&x, 5, None).unwrap();
        assert_eq!((out.channels(), out.height(), out.width()), (1, 16, 16));
        assert!(out.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a: NoisePredictor<f32> = NoisePredictor::build(toy_cfg(), 99).unwrap();
        let b: NoisePredictor<f32> = NoisePredictor::build(toy_cfg(), 99).unwrap();
        assert_eq!(a.params(), b.params());
        let c: NoisePredictor<f32> = NoisePredictor::build(toy_cfg(), 100).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn param_count_pure_function_of_config() {
        let cfg = toy_cfg();
        let n = NoisePredictor::<f32>::param_count_for(&cfg).unwrap();
        let model: NoisePredictor<f32> = NoisePredictor::build(cfg, 7).unwrap();
        assert_eq!(model.param_count(), n);
    }

    #[test]
    fn output_sensitive_to_time_and_condition() {
        let model: NoisePredictor<f32> = NoisePredictor::build(toy_cfg(), 3).unwrap();
        let mut rng = seeded_rng(5);
        let x = crate::diffusion::gaussian_image(&mut rng, 1, 16, 16);
        let a = model.predict(&x, 1, None).unwrap();
        let b = model.predict(&x, 9, None).unwrap();
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.0, "time embedding must be live");

        let mut cfg = toy_cfg();
        cfg.conditional = true;
        cfg.in_channels = 2;
        let cmodel: NoisePredictor<f32> = NoisePredictor::build(cfg, 3).unwrap();
        let cond1 = crate::diffusion::gaussian_image(&mut rng, 1, 16, 16);
        let cond2 = crate::diffusion::gaussian_image(&mut rng, 1, 16, 16);
        let p = cmodel.predict(&x, 4, Some(&cond1)).unwrap();
        let q = cmodel.predict(&x, 4, Some(&cond2)).unwrap();
        let max_diff = p
            .data()
            .iter()
            .zip(q.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.0, "condition must be live");
    }

    #[test]
    fn conditionality_mismatch_rejected() {
        let model: NoisePredictor<f32> = NoisePredictor::build(toy_cfg(), 0).unwrap();
        let x = ImageTensor::zeros(1, 16, 16);
        assert!(model.predict(&x, 1, Some(&x)).is_err());
        let wrong = ImageTensor::zeros(1, 8, 8);
        assert!(model.predict(&wrong, 1, None).is_err());
    }

    #[test]
    fn rgb_conditional_config_has_six_channel_fan_in() {
        let cfg = NoisePredictorConfig::conditional(64, 3, 8, vec![1, 2], vec![]);
        assert_eq!(cfg.in_channels, 6);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn untrained_loss_positive_and_finite() {
        let model: NoisePredictor<f32> = NoisePredictor::build(toy_cfg(), 1).unwrap();
        let schedule = VarianceSchedule::linear(50, 1e-4, 2e-2).unwrap();
        let mut state = TrainState::new(model, schedule, LossKind::L1, AdamParams::default());
        let mut rng = seeded_rng(2);
        let batch: Vec<TrainItem> = (0..4)
            .map(|_| TrainItem {
                target: crate::diffusion::gaussian_image(&mut rng, 1, 16, 16).clamp(-1.0, 1.0),
                cond: None,
            })
            .collect();
        let loss = state.train_step(&batch, &mut rng).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn empty_batch_rejected() {
        let model: NoisePredictor<f32> = NoisePredictor::build(toy_cfg(), 1).unwrap();
        let schedule = VarianceSchedule::linear(50, 1e-4, 2e-2).unwrap();
        let mut state = TrainState::new(model, schedule, LossKind::L1, AdamParams::default());
        let mut rng = seeded_rng(2);
        assert!(state.train_step(&[], &mut rng).is_err());
    }

    #[test]
    fn train_step_bit_reproducible() {
        let schedule = VarianceSchedule::linear(50, 1e-4, 2e-2).unwrap();
        let mut run = |seed: u64| -> Vec<f32> {
            let model: NoisePredictor<f32> = NoisePredictor::build(toy_cfg(), 11).unwrap();
            let mut state = TrainState::new(model, schedule.clone(), LossKind::L2, AdamParams::default());
            let mut rng = seeded_rng(seed);
            let batch: Vec<TrainItem> = (0..3)
                .map(|_| TrainItem {
                    target: crate::diffusion::gaussian_image(&mut rng, 1, 16, 16).clamp(-1.0, 1.0),
                    cond: None,
                })
                .collect();
            for _ in 0..3 {
                state.train_step(&batch, &mut rng).unwrap();
            }
            state.model().params().to_vec()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn learned_variance_head_shapes() {
        let mut cfg = toy_cfg();
        cfg.learned_variance = true;
        cfg.out_channels = 2;
        let model: NoisePredictor<f32> = NoisePredictor::build(cfg, 0).unwrap();
        let x = ImageTensor::zeros(1, 16, 16);
        let (noise, logvar) = predict_noise_and_logvar(&model, &x, 3, None).unwrap();
        assert_eq!(noise.channels(), 1);
        assert_eq!(logvar.unwrap().channels(), 1);
    }
}
