//! Blind degradation operator producing LQ-HQ training pairs: Gaussian
//! blur, bilinear downsampling, additive noise, and a block-DCT compression
//! proxy, each with randomly sampled strength.
//!
//! The pipeline works on the storage scale `[0, 255]` internally; additive
//! noise of strength `delta` has standard deviation `delta` gray levels.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::image::ImageTensor;
use crate::{Error, Result};

/// One draw of degradation strengths.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationParams {
    /// Gaussian blur std in pixels, in `[0.1, 10]`.
    pub sigma: f64,
    /// Down-sampling scale factor, in `[0.8, 8]`.
    pub r: f64,
    /// Additive noise std on the 0-255 scale, in `[0, 20]`.
    pub delta: f64,
    /// Compression quality factor, in `[60, 100]`.
    pub q: u8,
    pub grayscale: bool,
    pub hflip: bool,
}

pub const SIGMA_RANGE: (f64, f64) = (0.1, 10.0);
pub const SCALE_RANGE: (f64, f64) = (0.8, 8.0);
pub const DELTA_RANGE: (f64, f64) = (0.0, 20.0);
pub const QUALITY_RANGE: (u8, u8) = (60, 100);

impl DegradationParams {
    /// Identity-like parameters (weakest everything).
    pub fn nearly_identity() -> Self {
        DegradationParams { sigma: 0.1, r: 1.0, delta: 0.0, q: 100, grayscale: false, hflip: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(SIGMA_RANGE.0..=SIGMA_RANGE.1).contains(&self.sigma) {
            return Err(Error::invalid(format!("sigma {} out of range", self.sigma)));
        }
        if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&self.r) {
            return Err(Error::invalid(format!("scale factor {} out of range", self.r)));
        }
        if !(DELTA_RANGE.0..=DELTA_RANGE.1).contains(&self.delta) {
            return Err(Error::invalid(format!("delta {} out of range", self.delta)));
        }
        if !(QUALITY_RANGE.0..=QUALITY_RANGE.1).contains(&self.q) {
            return Err(Error::invalid(format!("quality {} out of range", self.q)));
        }
        Ok(())
    }
}

/// Uniform draw over the declared ranges; grayscale with the given
/// probability, horizontal flip with probability one half.
pub fn sample_params<R: Rng + ?Sized>(rng: &mut R, gray_probability: f64) -> DegradationParams {
    assert!((0.0..=1.0).contains(&gray_probability), "gray probability in [0,1]");
    DegradationParams {
        sigma: rng.gen_range(SIGMA_RANGE.0..=SIGMA_RANGE.1),
        r: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
        delta: rng.gen_range(DELTA_RANGE.0..=DELTA_RANGE.1),
        q: rng.gen_range(QUALITY_RANGE.0..=QUALITY_RANGE.1),
        grayscale: rng.gen_bool(gray_probability.clamp(0.0, 1.0)),
        hflip: rng.gen_bool(0.5),
    }
}

/// Normalized 2-D Gaussian blur kernel.
#[derive(Debug, Clone)]
pub struct BlurKernel {
    radius: usize,
    /// Separable 1-D factor; the 2-D kernel is its outer product.
    weights_1d: Vec<f64>,
}

impl BlurKernel {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("nonpositive blur sigma {sigma}")));
        }
        let radius = (3.0 * sigma).ceil() as usize;
        let mut weights_1d: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let d = i as f64 - radius as f64;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let sum: f64 = weights_1d.iter().sum();
        for w in &mut weights_1d {
            *w /= sum;
        }
        Ok(BlurKernel { radius, weights_1d })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Full `(2r+1)^2` weight grid (outer product of the 1-D factor).
    pub fn weights(&self) -> Vec<f64> {
        let n = 2 * self.radius + 1;
        let mut w = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                w.push(self.weights_1d[i] * self.weights_1d[j]);
            }
        }
        w
    }

    /// Convolve with reflect padding (separable passes).
    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let h = img.height();
        let w = img.width();
        let r = self.radius as isize;
        let mut out = img.clone();
        // horizontal pass
        let mut tmp = vec![0.0f64; h * w];
        for c in 0..img.channels() {
            let src = img.plane(c);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, &wk) in self.weights_1d.iter().enumerate() {
                        let xx = reflect_index(x as isize + k as isize - r, w);
                        acc += wk * src[y * w + xx];
                    }
                    tmp[y * w + x] = acc;
                }
            }
            // vertical pass
            let dst = out.plane_mut(c);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, &wk) in self.weights_1d.iter().enumerate() {
                        let yy = reflect_index(y as isize + k as isize - r, h);
                        acc += wk * tmp[yy * w + x];
                    }
                    dst[y * w + x] = acc;
                }
            }
        }
        out
    }
}

/// Reflect (mirror without repeating the edge sample) an index into `0..n`.
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Apply the full degradation chain; the output has the shape of the input.
///
/// Order: grayscale, horizontal flip, blur, bilinear downsample by `r`,
/// additive Gaussian noise, compression proxy, bilinear resize back to the
/// original resolution, clip.
pub fn degrade<R: Rng + ?Sized>(
    y: &ImageTensor,
    params: &DegradationParams,
    rng: &mut R,
) -> Result<ImageTensor> {
    params.validate()?;
    let mut img = if params.grayscale { y.to_grayscale() } else { y.clone() };
    if params.hflip {
        img = img.hflip();
    }

    let kernel = BlurKernel::gaussian(params.sigma)?;
    img = kernel.apply(&img);

    let down_h = ((img.height() as f64 / params.r).round() as usize).max(1);
    let down_w = ((img.width() as f64 / params.r).round() as usize).max(1);
    let mut small = img.resize_bilinear(down_h, down_w)?;

    if params.delta > 0.0 {
        // storage-scale noise: delta gray levels = 2*delta/255 in model units
        let scale = 2.0 * params.delta / 255.0;
        if params.grayscale {
            // a grayscale capture has one noise realization shared by the
            // replicated channels
            let plane = small.height() * small.width();
            let noise: Vec<f64> = (0..plane)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for c in 0..small.channels() {
                for (v, n) in small.plane_mut(c).iter_mut().zip(&noise) {
                    *v += n;
                }
            }
        } else {
            for v in small.data_mut() {
                *v += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    let compressed = compress_proxy(&small, params.q)?;
    let restored = compressed.resize_bilinear(y.height(), y.width())?;
    Ok(restored.clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Compression proxy: 8x8 block DCT with standard quantization tables
// ---------------------------------------------------------------------------

/// Standard luminance quantization table (quality 50 base), row-major.
const LUMA_QTABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

/// Standard chrominance quantization table.
const CHROMA_QTABLE: [f64; 64] = [
    17.0, 18.0, 24.0, 47.0, 99.0, 99.0, 99.0, 99.0, //
    18.0, 21.0, 26.0, 66.0, 99.0, 99.0, 99.0, 99.0, //
    24.0, 26.0, 56.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    47.0, 66.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, //
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
];

/// Scale a base table by the standard quality mapping.
fn scaled_qtable(base: &[f64; 64], q: u8) -> [f64; 64] {
    let scale = if q >= 50 { (100 - q) as f64 / 50.0 } else { 50.0 / q as f64 };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base.iter()) {
        *o = (b * scale).round().max(1.0);
    }
    out
}

fn dct8_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (k, row) in c.iter_mut().enumerate() {
        let norm = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = norm * ((std::f64::consts::PI / 8.0) * (n as f64 + 0.5) * k as f64).cos();
        }
    }
    c
}

fn dct2_8x8(block: &[f64; 64], basis: &[[f64; 8]; 8], out: &mut [f64; 64]) {
    let mut tmp = [0.0; 64];
    // rows
    for y in 0..8 {
        for k in 0..8 {
            let mut acc = 0.0;
            for n in 0..8 {
                acc += basis[k][n] * block[y * 8 + n];
            }
            tmp[y * 8 + k] = acc;
        }
    }
    // columns
    for x in 0..8 {
        for k in 0..8 {
            let mut acc = 0.0;
            for n in 0..8 {
                acc += basis[k][n] * tmp[n * 8 + x];
            }
            out[k * 8 + x] = acc;
        }
    }
}

fn idct2_8x8(coef: &[f64; 64], basis: &[[f64; 8]; 8], out: &mut [f64; 64]) {
    let mut tmp = [0.0; 64];
    for x in 0..8 {
        for n in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += basis[k][n] * coef[k * 8 + x];
            }
            tmp[n * 8 + x] = acc;
        }
    }
    for y in 0..8 {
        for n in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += basis[k][n] * tmp[y * 8 + k];
            }
            out[y * 8 + n] = acc;
        }
    }
}

/// Quantize one plane in place (values on the 0-255 scale). The DC
/// coefficient passes through unquantized so flat regions are preserved
/// exactly; only AC structure is coarsened.
fn quantize_plane(plane: &mut [f64], h: usize, w: usize, qtable: &[f64; 64], basis: &[[f64; 8]; 8]) {
    let bh = h.div_ceil(8);
    let bw = w.div_ceil(8);
    let mut block = [0.0f64; 64];
    let mut coef = [0.0f64; 64];
    let mut rec = [0.0f64; 64];
    for by in 0..bh {
        for bx in 0..bw {
            for iy in 0..8 {
                for ix in 0..8 {
                    // edge-replicated padding
                    let y = (by * 8 + iy).min(h - 1);
                    let x = (bx * 8 + ix).min(w - 1);
                    block[iy * 8 + ix] = plane[y * w + x] - 128.0;
                }
            }
            dct2_8x8(&block, basis, &mut coef);
            for i in 1..64 {
                coef[i] = (coef[i] / qtable[i]).round() * qtable[i];
            }
            idct2_8x8(&coef, basis, &mut rec);
            for iy in 0..8 {
                let y = by * 8 + iy;
                if y >= h {
                    continue;
                }
                for ix in 0..8 {
                    let x = bx * 8 + ix;
                    if x >= w {
                        continue;
                    }
                    plane[y * w + x] = rec[iy * 8 + ix] + 128.0;
                }
            }
        }
    }
}

/// Block-DCT compression proxy at quality factor `q` (YCbCr for RGB).
pub fn compress_proxy(img: &ImageTensor, q: u8) -> Result<ImageTensor> {
    if !(1..=100).contains(&q) {
        return Err(Error::invalid(format!("quality {q} out of [1,100]")));
    }
    let basis = dct8_basis();
    let luma_q = scaled_qtable(&LUMA_QTABLE, q);
    let chroma_q = scaled_qtable(&CHROMA_QTABLE, q);
    let h = img.height();
    let w = img.width();
    let n = h * w;

    // to storage scale
    let storage: Vec<f64> = img.data().iter().map(|&v| (v + 1.0) * 127.5).collect();

    let out_data: Vec<f64> = if img.channels() == 1 {
        let mut y = storage;
        quantize_plane(&mut y, h, w, &luma_q, &basis);
        y
    } else {
        let (rp, gp, bp) = (&storage[..n], &storage[n..2 * n], &storage[2 * n..]);
        let mut yy = vec![0.0; n];
        let mut cb = vec![0.0; n];
        let mut cr = vec![0.0; n];
        for i in 0..n {
            let (r, g, b) = (rp[i], gp[i], bp[i]);
            yy[i] = 0.299 * r + 0.587 * g + 0.114 * b;
            cb[i] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
            cr[i] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
        }
        quantize_plane(&mut yy, h, w, &luma_q, &basis);
        quantize_plane(&mut cb, h, w, &chroma_q, &basis);
        quantize_plane(&mut cr, h, w, &chroma_q, &basis);
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            let (y, cbv, crv) = (yy[i], cb[i] - 128.0, cr[i] - 128.0);
            out[i] = y + 1.402 * crv;
            out[n + i] = y - 0.344136 * cbv - 0.714136 * crv;
            out[2 * n + i] = y + 1.772 * cbv;
        }
        out
    };

    let model: Vec<f64> = out_data.iter().map(|&v| (v.clamp(0.0, 255.0)) / 127.5 - 1.0).collect();
    ImageTensor::from_vec(img.channels(), h, w, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    pub(crate) fn probe_image(channels: usize, size: usize) -> ImageTensor {
        // smooth gradient with a few structures; deterministic
        let mut img = ImageTensor::zeros(channels, size, size);
        for c in 0..channels {
            for y in 0..size {
                for x in 0..size {
                    let fx = x as f64 / size as f64;
                    let fy = y as f64 / size as f64;
                    let v = 0.6 * (2.0 * std::f64::consts::PI * (fx + 0.3 * c as f64)).sin()
                        * (std::f64::consts::PI * fy).cos()
                        + 0.2 * fx
                        - 0.1;
                    img.set(c, y, x, v.clamp(-1.0, 1.0));
                }
            }
        }
        img
    }

    #[test]
    fn kernel_weights_sum_to_one() {
        for sigma in [0.1, 0.5, 1.7, 5.0, 10.0] {
            let k = BlurKernel::gaussian(sigma).unwrap();
            let sum: f64 = k.weights().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sigma {sigma}: sum {sum}");
        }
    }

    #[test]
    fn kernel_symmetric_under_reflection() {
        let k = BlurKernel::gaussian(2.3).unwrap();
        let n = 2 * k.radius() + 1;
        let w = k.weights();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(w[i * n + j], w[(n - 1 - i) * n + (n - 1 - j)]);
                assert_eq!(w[i * n + j], w[j * n + i]);
            }
        }
    }

    #[test]
    fn tiny_sigma_is_near_identity() {
        let k = BlurKernel::gaussian(0.1).unwrap();
        let w = k.weights();
        let n = 2 * k.radius() + 1;
        let center = w[(n / 2) * n + n / 2];
        assert!(center > 0.99, "center weight {center}");
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = ImageTensor::from_vec(3, 16, 16, vec![0.37; 3 * 256]).unwrap();
        let k = BlurKernel::gaussian(3.0).unwrap();
        let out = k.apply(&img);
        for v in out.data() {
            assert!((v - 0.37).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_rejects_nonpositive_sigma() {
        assert!(BlurKernel::gaussian(0.0).is_err());
        assert!(BlurKernel::gaussian(-1.0).is_err());
        assert!(BlurKernel::gaussian(f64::NAN).is_err());
    }

    #[test]
    fn sampled_params_stay_in_ranges() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut saw_gray = false;
        for _ in 0..2000 {
            let p = sample_params(&mut rng, 0.3);
            p.validate().unwrap();
            saw_gray |= p.grayscale;
        }
        assert!(saw_gray);
    }

    #[test]
    fn zero_gray_probability_never_grays() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..500 {
            assert!(!sample_params(&mut rng, 0.0).grayscale);
        }
    }

    #[test]
    fn fixed_seed_gives_identical_parameter_sequence() {
        let draw = |seed: u64| -> Vec<DegradationParams> {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_params(&mut rng, 0.1)).collect()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn near_identity_params_keep_high_psnr() {
        let img = probe_image(3, 64);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let out = degrade(&img, &DegradationParams::nearly_identity(), &mut rng).unwrap();
        let p = psnr(&out, &img).unwrap();
        assert!(p > 40.0, "near-identity PSNR {p} dB");
    }

    #[test]
    fn noise_residual_std_matches_delta() {
        let img = probe_image(3, 64);
        let params = DegradationParams {
            sigma: 0.1,
            r: 1.0,
            delta: 20.0,
            q: 100,
            grayscale: false,
            hflip: false,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let out = degrade(&img, &params, &mut rng).unwrap();
        // measure on the unit 0-1 scale: nominal std is delta/255
        let resid: Vec<f64> = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b) / 2.0)
            .collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (resid.len() - 1) as f64;
        let std = var.sqrt();
        let nominal = 20.0 / 255.0;
        assert!(
            (std - nominal).abs() / nominal < 0.10,
            "residual std {std:.5} vs nominal {nominal:.5}"
        );
    }

    #[test]
    fn grayscale_output_channels_exactly_equal() {
        let img = probe_image(3, 32);
        let params = DegradationParams { sigma: 1.0, r: 2.0, delta: 5.0, q: 80, grayscale: true, hflip: false };
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let out = degrade(&img, &params, &mut rng).unwrap();
        for i in 0..32 * 32 {
            assert_eq!(out.plane(0)[i], out.plane(1)[i]);
            assert_eq!(out.plane(0)[i], out.plane(2)[i]);
        }
    }

    #[test]
    fn degrade_deterministic_under_seed() {
        let img = probe_image(3, 32);
        let params = DegradationParams { sigma: 2.0, r: 3.0, delta: 10.0, q: 70, grayscale: false, hflip: true };
        let a = degrade(&img, &params, &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        let b = degrade(&img, &params, &mut ChaCha12Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn monotone_degradation_grid() {
        let img = probe_image(3, 64);
        let sigmas = [0.5, 2.0, 5.0];
        let deltas = [0.0, 8.0, 16.0];
        let mut grid = [[0.0f64; 3]; 3];
        for (i, &sigma) in sigmas.iter().enumerate() {
            for (j, &delta) in deltas.iter().enumerate() {
                let params = DegradationParams { sigma, r: 2.0, delta, q: 90, grayscale: false, hflip: false };
                let mut rng = ChaCha12Rng::seed_from_u64(6);
                let out = degrade(&img, &params, &mut rng).unwrap();
                grid[i][j] = psnr(&out, &img).unwrap();
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                for (i2, j2) in [(i + 1, j), (i, j + 1)] {
                    if i2 < 3 && j2 < 3 {
                        assert!(
                            grid[i2][j2] <= grid[i][j] + 1e-9,
                            "psnr grid not monotone: ({i},{j})={} < ({i2},{j2})={}",
                            grid[i][j],
                            grid[i2][j2]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn proxy_q100_nearly_lossless_on_smooth_gradient() {
        let img = probe_image(3, 32);
        let out = compress_proxy(&img, 100).unwrap();
        let max_err = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        // 2/255 on the storage scale is 4/255 in model units
        assert!(max_err <= 4.0 / 255.0, "max err {max_err}");
    }

    #[test]
    fn proxy_keeps_constant_images_for_any_q() {
        for q in [1, 30, 60, 85, 100] {
            let img = ImageTensor::from_vec(3, 24, 24, vec![0.123; 3 * 576]).unwrap();
            let out = compress_proxy(&img, q).unwrap();
            for v in out.data() {
                assert!((v - 0.123).abs() < 1e-6, "q={q}");
            }
        }
    }

    #[test]
    fn proxy_low_quality_hurts_more() {
        let img = probe_image(3, 64);
        let mae = |a: &ImageTensor, b: &ImageTensor| -> f64 {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        };
        let e100 = mae(&compress_proxy(&img, 100).unwrap(), &img);
        let e60 = mae(&compress_proxy(&img, 60).unwrap(), &img);
        assert!(e60 > e100, "q60 err {e60} vs q100 err {e100}");
    }

    #[test]
    fn proxy_idempotent_at_same_quality() {
        let img = probe_image(3, 48);
        let once = compress_proxy(&img, 70).unwrap();
        let twice = compress_proxy(&once, 70).unwrap();
        let max_err = once
            .data()
            .iter()
            .zip(twice.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        // one storage level is 2/255 in model units
        assert!(max_err <= 2.0 / 255.0, "idempotence err {max_err}");
    }

    #[test]
    fn proxy_rejects_bad_quality() {
        let img = probe_image(1, 16);
        assert!(compress_proxy(&img, 0).is_err());
        assert!(compress_proxy(&img, 101).is_err());
    }
}
