//! Quantitative evaluation: PSNR, SSIM, and a Fréchet-Gaussian distance
//! over small fixed feature descriptors.
//!
//! The canonical FID feature network is replaced at this scale by small
//! fixed extractors: a trained digit classifier's penultimate layer for the
//! coverage study, and a blur-pyramid band descriptor with a seeded random
//! projection for the face-toy sets. The Fréchet inequality being checked is
//! distributional, so any fixed informative extractor serves.

use nalgebra::{DMatrix, DVector};

use crate::degrade::BlurKernel;
use crate::image::{pairwise_sum, ImageTensor};
use crate::{Error, Result};

/// Fitted mean/covariance summary of a feature cloud.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    /// Row-major `d x d` symmetric covariance.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Per-set evaluation report. `psnr`/`ssim` are means over the per-image
/// breakdown; `frechet` compares the two sets as wholes.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub frechet: f64,
    pub per_image: Vec<(String, f64, f64)>,
}

/// Peak signal-to-noise ratio in dB on the 0-255 scale; identical images
/// map to `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.require_same_shape(b)?;
    let se: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) * 127.5;
            d * d
        })
        .collect();
    let mse = pairwise_sum(&se) / se.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in -r..=r {
        for j in -r..=r {
            w.push((-((i * i + j * j) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5) on the luma
/// plane, valid-positions only.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.require_same_shape(b)?;
    let h = a.height();
    let w = a.width();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    // storage-scale luma
    let la: Vec<f64> = a.luma().iter().map(|v| (v + 1.0) * 127.5).collect();
    let lb: Vec<f64> = b.luma().iter().map(|v| (v + 1.0) * 127.5).collect();
    let win = ssim_window();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let half = SSIM_WINDOW / 2;

    let mut acc = 0.0;
    let mut count = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            let mut wi = 0usize;
            for iy in cy - half..=cy + half {
                for ix in cx - half..=cx + half {
                    let wv = win[wi];
                    wi += 1;
                    let xv = la[iy * w + ix];
                    let yv = lb[iy * w + ix];
                    mu_x += wv * xv;
                    mu_y += wv * yv;
                    xx += wv * xv * xv;
                    yy += wv * yv * yv;
                    xy += wv * xv * yv;
                }
            }
            let var_x = xx - mu_x * mu_x;
            let var_y = yy - mu_y * mu_y;
            let cov = xy - mu_x * mu_y;
            let s = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
            acc += s;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Sample mean and unbiased covariance of a fixed-dimension feature set.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<GaussianSummary> {
    if features.len() < 2 {
        return Err(Error::invalid("need at least 2 samples to fit a Gaussian"));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::invalid("inconsistent feature dimension"));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (f[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1.0);
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianSummary { mean, covariance: cov, count: features.len() })
}

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues
/// clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Squared 2-Wasserstein distance between Gaussians:
/// `||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`.
pub fn frechet_distance(g1: &GaussianSummary, g2: &GaussianSummary) -> Result<f64> {
    let d = g1.dim();
    if g2.dim() != d {
        return Err(Error::invalid(format!("dimension mismatch {d} vs {}", g2.dim())));
    }
    let s1 = DMatrix::from_row_slice(d, d, &g1.covariance);
    let s2 = DMatrix::from_row_slice(d, d, &g2.covariance);
    for (s, name) in [(&s1, "first"), (&s2, "second")] {
        let asym = (s - s.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(Error::invalid(format!("{name} covariance not symmetric (dev {asym})")));
        }
        let min_eig = s.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-8 {
            return Err(Error::invalid(format!("{name} covariance not PSD (min eig {min_eig})")));
        }
    }
    let mu1 = DVector::from_row_slice(&g1.mean);
    let mu2 = DVector::from_row_slice(&g2.mean);
    let dmu = &mu1 - &mu2;

    let root1 = psd_sqrt(&s1);
    let inner = &root1 * &s2 * &root1;
    let cross = psd_sqrt(&inner);
    let dist = dmu.dot(&dmu) + (s1 + s2 - cross * 2.0).trace();
    Ok(dist.max(0.0))
}

/// Fixed mapping from an image to a feature vector.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, img: &ImageTensor) -> Vec<f64>;
}

/// Fréchet distance between the Gaussian fits of two image sets under one
/// fixed extractor.
pub fn proxy_fid(
    set_a: &[ImageTensor],
    set_b: &[ImageTensor],
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::invalid("proxy fid needs nonempty image sets"));
    }
    let fa: Vec<Vec<f64>> = set_a.iter().map(|i| extractor.extract(i)).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(|i| extractor.extract(i)).collect();
    frechet_distance(&fit_gaussian(&fa)?, &fit_gaussian(&fb)?)
}

/// Blur-pyramid band-energy descriptor with a seeded random projection to
/// eight dimensions. Band magnitudes are pooled on a 4x4 grid, which keeps
/// the descriptor sensitive to both layout and sharpness.
pub struct PyramidDescriptor {
    projection: Vec<f64>,
    in_dim: usize,
}

impl PyramidDescriptor {
    pub const DIM: usize = 8;

    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let in_dim = 3 * 16;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let projection = (0..Self::DIM * in_dim)
            .map(|_| <rand_distr::StandardNormal as Distribution<f64>>::sample(&normal, &mut rng) / (in_dim as f64).sqrt())
            .collect();
        PyramidDescriptor { projection, in_dim }
    }

    fn pool4(plane: &[f64], h: usize, w: usize) -> [f64; 16] {
        let mut out = [0.0; 16];
        let mut counts = [0usize; 16];
        for y in 0..h {
            for x in 0..w {
                let by = (y * 4 / h).min(3);
                let bx = (x * 4 / w).min(3);
                out[by * 4 + bx] += plane[y * w + x].abs();
                counts[by * 4 + bx] += 1;
            }
        }
        for (o, c) in out.iter_mut().zip(counts) {
            if c > 0 {
                *o /= c as f64;
            }
        }
        out
    }
}

impl FeatureExtractor for PyramidDescriptor {
    fn dim(&self) -> usize {
        Self::DIM
    }

    fn extract(&self, img: &ImageTensor) -> Vec<f64> {
        let h = img.height();
        let w = img.width();
        let luma = ImageTensor::from_vec(1, h, w, img.luma()).expect("luma plane");
        let blur1 = BlurKernel::gaussian(1.0).expect("fixed sigma").apply(&luma);
        let blur2 = BlurKernel::gaussian(2.5).expect("fixed sigma").apply(&blur1);

        // band decomposition: fine detail, mid detail, base
        let band0: Vec<f64> = luma.data().iter().zip(blur1.data()).map(|(a, b)| a - b).collect();
        let band1: Vec<f64> = blur1.data().iter().zip(blur2.data()).map(|(a, b)| a - b).collect();
        let base = blur2.data();

        let mut raw = Vec::with_capacity(self.in_dim);
        raw.extend(Self::pool4(&band0, h, w));
        raw.extend(Self::pool4(&band1, h, w));
        raw.extend(Self::pool4(base, h, w));

        (0..Self::DIM)
            .map(|k| {
                raw.iter()
                    .enumerate()
                    .map(|(i, v)| self.projection[k * self.in_dim + i] * v)
                    .sum()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::gaussian_image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn psnr_identical_is_infinite() {
        let a = ImageTensor::from_vec(1, 4, 4, vec![0.25; 16]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_one_level_uniform_difference() {
        // one storage level everywhere: MSE = 1, PSNR = 10*log10(255^2)
        let a = ImageTensor::from_storage_u8(1, 8, 8, &[100u8; 64]).unwrap();
        let b = ImageTensor::from_storage_u8(1, 8, 8, &[101u8; 64]).unwrap();
        let expect = 10.0 * (255.0f64 * 255.0).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 48.1308).abs() < 1e-3);
    }

    #[test]
    fn psnr_matches_naive_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = gaussian_image(&mut rng, 3, 8, 8).clamp(-1.0, 1.0);
        let b = gaussian_image(&mut rng, 3, 8, 8).clamp(-1.0, 1.0);
        let mut mse = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            let d = (x - y) * 127.5;
            mse += d * d;
        }
        mse /= a.len() as f64;
        let naive = 10.0 * (255.0 * 255.0 / mse).log10();
        assert!((psnr(&a, &b).unwrap() - naive).abs() < 1e-9);
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = gaussian_image(&mut rng, 1, 16, 16).clamp(-1.0, 1.0);
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_inverted_structure_is_negative() {
        // binary checkerboard away from mid-gray; inversion anticorrelates
        let mut a = ImageTensor::zeros(1, 16, 16);
        for y in 0..16 {
            for x in 0..16 {
                a.set(0, y, x, if (x / 2 + y / 2) % 2 == 0 { 0.7 } else { -0.7 });
            }
        }
        let b = a.map(|v| -v);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0, "inverted ssim {s}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ImageTensor::zeros(1, 8, 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn fit_gaussian_antipodal_points() {
        let v = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let g = fit_gaussian(&[v.clone(), neg]).unwrap();
        for m in &g.mean {
            assert!(m.abs() < 1e-12);
        }
        // unbiased covariance of {v, -v}: 2 v v^T
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.covariance[i * 3 + j] - 2.0 * v[i] * v[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fit_gaussian_duplicated_dataset_same_moments() {
        let pts: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.0, 0.5]];
        let mut doubled = pts.clone();
        doubled.extend(pts.clone());
        let g1 = fit_gaussian(&pts).unwrap();
        let g2 = fit_gaussian(&doubled).unwrap();
        for (a, b) in g1.mean.iter().zip(&g2.mean) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g1.count, 3);
        assert_eq!(g2.count, 6);
        // covariance shrinks slightly with the duplicate (n-1 denominator),
        // but the mean is identical; check covariance ratio explicitly
        for (a, b) in g1.covariance.iter().zip(&g2.covariance) {
            assert!((b / a - 4.0 / 5.0).abs() < 1e-9 || a.abs() < 1e-12);
        }
    }

    #[test]
    fn fit_gaussian_rejects_single_sample() {
        assert!(fit_gaussian(&[vec![1.0]]).is_err());
    }

    #[test]
    fn frechet_same_summary_is_zero() {
        let g = fit_gaussian(&[vec![1.0, 2.0], vec![-1.0, 0.0], vec![0.5, 1.0]]).unwrap();
        let d = frechet_distance(&g, &g).unwrap();
        assert!(d.abs() < 1e-8);
    }

    #[test]
    fn frechet_1d_closed_forms() {
        let make = |mu: f64, var: f64| GaussianSummary { mean: vec![mu], covariance: vec![var], count: 10 };
        // N(0,1) vs N(1,1): distance 1
        let d = frechet_distance(&make(0.0, 1.0), &make(1.0, 1.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-10);
        // N(0,1) vs N(0,4): (1-2)^2 = 1
        let d = frechet_distance(&make(0.0, 1.0), &make(0.0, 4.0)).unwrap();
        assert!((d - 1.0).abs() < 1e-10);
    }

    #[test]
    fn frechet_symmetric() {
        let g1 = fit_gaussian(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 1.0]]).unwrap();
        let g2 = fit_gaussian(&[vec![-1.0, 0.5], vec![0.3, -1.0], vec![0.0, 0.0]]).unwrap();
        let d12 = frechet_distance(&g1, &g2).unwrap();
        let d21 = frechet_distance(&g2, &g1).unwrap();
        assert!((d12 - d21).abs() < 1e-8);
        assert!(d12 > 0.0);
    }

    #[test]
    fn frechet_rejects_dimension_mismatch() {
        let g1 = GaussianSummary { mean: vec![0.0], covariance: vec![1.0], count: 2 };
        let g2 = GaussianSummary { mean: vec![0.0, 0.0], covariance: vec![1.0, 0.0, 0.0, 1.0], count: 2 };
        assert!(frechet_distance(&g1, &g2).is_err());
    }

    #[test]
    fn proxy_fid_zero_on_identical_sets_and_order_invariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let set: Vec<ImageTensor> = (0..12).map(|_| gaussian_image(&mut rng, 3, 16, 16).clamp(-1.0, 1.0)).collect();
        let ex = PyramidDescriptor::new(7);
        let d = proxy_fid(&set, &set, &ex).unwrap();
        assert!(d < 1e-6, "identical sets: {d}");

        let mut shuffled = set.clone();
        shuffled.reverse();
        let d2 = proxy_fid(&shuffled, &set, &ex).unwrap();
        assert!((d2 - d).abs() < 1e-9);
    }

    #[test]
    fn proxy_fid_positive_for_degraded_set() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let hq: Vec<ImageTensor> = (0..16)
            .map(|i| {
                let mut img = ImageTensor::zeros(3, 32, 32);
                for c in 0..3 {
                    for y in 0..32 {
                        for x in 0..32 {
                            let v = ((x as f64 * 0.7 + i as f64) .sin() + (y as f64 * 0.5).cos()) * 0.4;
                            img.set(c, y, x, v);
                        }
                    }
                }
                img
            })
            .collect();
        let lq: Vec<ImageTensor> = hq
            .iter()
            .map(|img| {
                let p = crate::degrade::DegradationParams {
                    sigma: 3.0,
                    r: 4.0,
                    delta: 10.0,
                    q: 60,
                    grayscale: false,
                    hflip: false,
                };
                crate::degrade::degrade(img, &p, &mut rng).unwrap()
            })
            .collect();
        let ex = PyramidDescriptor::new(7);
        let d = proxy_fid(&lq, &hq, &ex).unwrap();
        assert!(d > 1e-3, "degraded set distance {d}");
    }
}
