//! Cascaded inference: a full reverse chain at low resolution conditioned on
//! the degraded input, a truncated conditional super-resolution chain, and a
//! truncated unconditional texture pass.

use rand::Rng;

use crate::diffusion::{forward_marginal, gaussian_image, reverse_step};
use crate::image::ImageTensor;
use crate::metrics::{proxy_fid, psnr, ssim, FeatureExtractor};
use crate::nn::{seeded_rng, EpsModel};
use crate::schedule::VarianceSchedule;
use crate::{Error, Result};

/// Resolutions, truncation times, and per-stage schedule bindings for the
/// three-stage cascade.
#[derive(Debug, Clone)]
pub struct CascadeConfig {
    pub low_res: usize,
    pub high_res: usize,
    /// Truncation start time of the conditional super-resolution stage.
    pub n1: usize,
    /// Truncation start time of the texture stage.
    pub n2: usize,
    pub stage1: VarianceSchedule,
    pub stage2: VarianceSchedule,
    pub tem: VarianceSchedule,
}

impl CascadeConfig {
    pub fn new(
        low_res: usize,
        high_res: usize,
        n1: usize,
        n2: usize,
        stage1: VarianceSchedule,
        stage2: VarianceSchedule,
        tem: VarianceSchedule,
    ) -> Result<Self> {
        if low_res == 0 || high_res % low_res != 0 || high_res / low_res < 2 {
            return Err(Error::invalid(format!(
                "cascade needs high_res = r * low_res with integer r >= 2, got {low_res} -> {high_res}"
            )));
        }
        if n1 > stage2.t_max() {
            return Err(Error::TimeOutOfRange { t: n1 as i64, max: stage2.t_max() });
        }
        if n2 > tem.t_max() {
            return Err(Error::TimeOutOfRange { t: n2 as i64, max: tem.t_max() });
        }
        Ok(CascadeConfig { low_res, high_res, n1, n2, stage1, stage2, tem })
    }

    /// Integer upsampling factor between the stages.
    pub fn scale_factor(&self) -> usize {
        self.high_res / self.low_res
    }

    /// Full-scale configuration: 128 -> 512 cascade, 2000-step chains with
    /// beta in [1e-6, 1e-2] for both restoration stages, a 1000-step
    /// [1e-4, 2e-2] texture chain, truncation at 1000 and 100.
    pub fn paper_scale() -> Self {
        CascadeConfig::new(
            128,
            512,
            1000,
            100,
            VarianceSchedule::linear(2000, 1e-6, 1e-2).expect("valid schedule"),
            VarianceSchedule::linear(2000, 1e-6, 1e-2).expect("valid schedule"),
            VarianceSchedule::linear(1000, 1e-4, 2e-2).expect("valid schedule"),
        )
        .expect("valid cascade")
    }

    /// Desk-scale preset: 16 -> 64 cascade, T = 400/400/200, N1 = 200,
    /// N2 = 20 (the same truncation fractions as the full-scale defaults).
    /// Beta ranges are scaled so each chain accumulates the same total
    /// noise as its full-scale counterpart.
    pub fn desk() -> Self {
        CascadeConfig::new(
            16,
            64,
            200,
            20,
            VarianceSchedule::linear(400, 1e-6, 5e-2).expect("valid schedule"),
            VarianceSchedule::linear(400, 1e-6, 5e-2).expect("valid schedule"),
            VarianceSchedule::linear(200, 5e-4, 1e-1).expect("valid schedule"),
        )
        .expect("valid cascade")
    }
}

/// Batched reverse chain from `from_t` down to 1 with fresh noise per step
/// (zero at the final step).
fn reverse_chain_batch<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    mut ys: Vec<ImageTensor>,
    conds: Option<&[ImageTensor]>,
    from_t: usize,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<Vec<ImageTensor>> {
    for t in (1..=from_t).rev() {
        let eps_hat = model.predict_batch(&ys, t, conds)?;
        for (i, y) in ys.iter_mut().enumerate() {
            let eps = if t > 1 {
                gaussian_image(rng, y.channels(), y.height(), y.width())
            } else {
                ImageTensor::zeros(y.channels(), y.height(), y.width())
            };
            *y = reverse_step(y, t, &eps_hat[i], &eps, schedule)?;
        }
    }
    Ok(ys)
}

/// Full unconditional reverse chain from pure noise.
pub fn sample_unconditional_batch<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    count: usize,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<Vec<ImageTensor>> {
    if model.conditional() {
        return Err(Error::invalid("unconditional sampling needs an unconditional model"));
    }
    let res = model.resolution();
    let ch = model.image_channels();
    let ys: Vec<ImageTensor> = (0..count).map(|_| gaussian_image(rng, ch, res, res)).collect();
    reverse_chain_batch(model, ys, None, schedule.t_max(), schedule, rng)
}

/// Full reverse chain at low resolution from pure noise, conditioned on the
/// (downsampled) degraded input.
pub fn sample_stage1<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    x0_lowres: &ImageTensor,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<ImageTensor> {
    Ok(sample_stage1_batch(model, std::slice::from_ref(x0_lowres), schedule, rng)?.remove(0))
}

pub fn sample_stage1_batch<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    conds: &[ImageTensor],
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<Vec<ImageTensor>> {
    if !model.conditional() {
        return Err(Error::invalid("stage-1 model must be conditional"));
    }
    let res = model.resolution();
    for c in conds {
        if c.height() != res || c.width() != res {
            return Err(Error::shape(format!("{res}x{res} condition"), c.shape_string()));
        }
    }
    let t_max = schedule.t_max();
    let ys: Vec<ImageTensor> = conds
        .iter()
        .map(|c| gaussian_image(rng, c.channels(), res, res))
        .collect();
    reverse_chain_batch(model, ys, Some(conds), t_max, schedule, rng)
}

/// Truncated conditional super-resolution: upsample, diffuse to `n1`, then
/// denoise conditioned on the upsampled image.
pub fn sample_stage2_truncated<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    x_tilde: &ImageTensor,
    n1: usize,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<ImageTensor> {
    Ok(sample_stage2_batch(model, std::slice::from_ref(x_tilde), n1, schedule, rng)?.remove(0))
}

pub fn sample_stage2_batch<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    x_tildes: &[ImageTensor],
    n1: usize,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<Vec<ImageTensor>> {
    if n1 > schedule.t_max() {
        return Err(Error::TimeOutOfRange { t: n1 as i64, max: schedule.t_max() });
    }
    let res = model.resolution();
    let ups: Vec<ImageTensor> = x_tildes
        .iter()
        .map(|x| x.resize_bilinear(res, res))
        .collect::<Result<_>>()?;
    if n1 == 0 {
        return Ok(ups);
    }
    let ys: Vec<ImageTensor> = ups
        .iter()
        .map(|u| {
            let eps = gaussian_image(rng, u.channels(), res, res);
            forward_marginal(u, n1, &eps, schedule)
        })
        .collect::<Result<_>>()?;
    reverse_chain_batch(model, ys, Some(&ups), n1, schedule, rng)
}

/// Truncated unconditional texture pass: diffuse the restored image to `n2`
/// and denoise without consulting any condition.
pub fn sample_tem<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    y_prime: &ImageTensor,
    n2: usize,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<ImageTensor> {
    Ok(sample_tem_batch(model, std::slice::from_ref(y_prime), n2, schedule, rng)?.remove(0))
}

pub fn sample_tem_batch<R: Rng + ?Sized>(
    model: &dyn EpsModel,
    y_primes: &[ImageTensor],
    n2: usize,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<Vec<ImageTensor>> {
    if n2 > schedule.t_max() {
        return Err(Error::TimeOutOfRange { t: n2 as i64, max: schedule.t_max() });
    }
    if model.conditional() {
        return Err(Error::invalid("texture model must be unconditional"));
    }
    if n2 == 0 {
        return Ok(y_primes.to_vec());
    }
    let ys: Vec<ImageTensor> = y_primes
        .iter()
        .map(|y| {
            let eps = gaussian_image(rng, y.channels(), y.height(), y.width());
            forward_marginal(y, n2, &eps, schedule)
        })
        .collect::<Result<_>>()?;
    reverse_chain_batch(model, ys, None, n2, schedule, rng)
}

/// The three models of one cascade.
pub struct CascadeModels<'a> {
    pub stage1: &'a dyn EpsModel,
    pub stage2: &'a dyn EpsModel,
    pub tem: &'a dyn EpsModel,
}

/// Final output plus the two stage intermediates for inspection.
#[derive(Debug, Clone)]
pub struct RestoreOutput {
    pub restored: ImageTensor,
    pub stage1_out: ImageTensor,
    pub stage2_out: ImageTensor,
}

/// Run the full cascade on one degraded high-resolution input. The ground
/// truth is never consulted.
pub fn restore<R: Rng + ?Sized>(
    x: &ImageTensor,
    models: &CascadeModels<'_>,
    config: &CascadeConfig,
    rng: &mut R,
) -> Result<RestoreOutput> {
    Ok(restore_batch(std::slice::from_ref(x), models, config, rng)?.remove(0))
}

/// Batched cascade; samples are kept unclipped inside each reverse chain and
/// clipped when handed across stages.
pub fn restore_batch<R: Rng + ?Sized>(
    xs: &[ImageTensor],
    models: &CascadeModels<'_>,
    config: &CascadeConfig,
    rng: &mut R,
) -> Result<Vec<RestoreOutput>> {
    for x in xs {
        if x.height() != config.high_res || x.width() != config.high_res {
            return Err(Error::shape(
                format!("{0}x{0} input", config.high_res),
                x.shape_string(),
            ));
        }
    }
    let conds_low: Vec<ImageTensor> = xs
        .iter()
        .map(|x| x.resize_bilinear(config.low_res, config.low_res))
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("stage1"))?;

    let stage1_out: Vec<ImageTensor> =
        sample_stage1_batch(models.stage1, &conds_low, &config.stage1, rng)
            .map_err(|e| e.in_stage("stage1"))?
            .into_iter()
            .map(|y| y.clamp(-1.0, 1.0))
            .collect();

    let stage2_out: Vec<ImageTensor> =
        sample_stage2_batch(models.stage2, &stage1_out, config.n1, &config.stage2, rng)
            .map_err(|e| e.in_stage("stage2"))?
            .into_iter()
            .map(|y| y.clamp(-1.0, 1.0))
            .collect();

    let restored: Vec<ImageTensor> =
        sample_tem_batch(models.tem, &stage2_out, config.n2, &config.tem, rng)
            .map_err(|e| e.in_stage("texture"))?
            .into_iter()
            .map(|y| y.clamp(-1.0, 1.0))
            .collect();

    Ok(restored
        .into_iter()
        .zip(stage1_out)
        .zip(stage2_out)
        .map(|((r, s1), s2)| RestoreOutput { restored: r, stage1_out: s1, stage2_out: s2 })
        .collect())
}

/// One row of the truncation-time ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub sweep: &'static str,
    pub value: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub frechet: f64,
}

/// Two independent sweeps over the truncation times: each grid point runs
/// the full cascade over the evaluation pairs with the other time held at
/// its configured default. Produces `|grid_n1| + |grid_n2|` rows.
pub fn ablate_truncation(
    models: &CascadeModels<'_>,
    config: &CascadeConfig,
    grid_n1: &[usize],
    grid_n2: &[usize],
    eval_pairs: &[(ImageTensor, ImageTensor)],
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    if grid_n1.is_empty() && grid_n2.is_empty() {
        return Err(Error::invalid("ablation grids are empty"));
    }
    if eval_pairs.is_empty() {
        return Err(Error::invalid("ablation needs evaluation pairs"));
    }
    for &v in grid_n1 {
        if v > config.stage2.t_max() {
            return Err(Error::TimeOutOfRange { t: v as i64, max: config.stage2.t_max() });
        }
    }
    for &v in grid_n2 {
        if v > config.tem.t_max() {
            return Err(Error::TimeOutOfRange { t: v as i64, max: config.tem.t_max() });
        }
    }

    let lqs: Vec<ImageTensor> = eval_pairs.iter().map(|(lq, _)| lq.clone()).collect();
    let hqs: Vec<ImageTensor> = eval_pairs.iter().map(|(_, hq)| hq.clone()).collect();

    let mut rows = Vec::new();
    let mut run_point = |sweep: &'static str, cfg: CascadeConfig, value: usize| -> Result<AblationRow> {
        let mut rng = seeded_rng(seed ^ (value as u64) ^ if sweep == "n1" { 0x5eed1 } else { 0x5eed2 });
        let outs = restore_batch(&lqs, models, &cfg, &mut rng)?;
        let restored: Vec<ImageTensor> = outs.into_iter().map(|o| o.restored).collect();
        let mut psnr_acc = 0.0;
        let mut ssim_acc = 0.0;
        for (r, hq) in restored.iter().zip(&hqs) {
            psnr_acc += psnr(r, hq)?;
            ssim_acc += ssim(r, hq)?;
        }
        let fre = proxy_fid(&restored, &hqs, extractor)?;
        Ok(AblationRow {
            sweep,
            value,
            ssim: ssim_acc / hqs.len() as f64,
            psnr: psnr_acc / hqs.len() as f64,
            frechet: fre,
        })
    };

    for &n1 in grid_n1 {
        let mut cfg = config.clone();
        cfg.n1 = n1;
        rows.push(run_point("n1", cfg, n1)?);
    }
    for &n2 in grid_n2 {
        let mut cfg = config.clone();
        cfg.n2 = n2;
        rows.push(run_point("n2", cfg, n2)?);
    }
    Ok(rows)
}

/// RFC-4180-style CSV for the ablation rows (SSIM, PSNR, Fréchet column
/// order).
pub fn write_ablation_csv(rows: &[AblationRow], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
    w.write_record(["sweep", "value", "ssim", "psnr", "frechet"])
        .and_then(|_| {
            rows.iter().try_for_each(|r| {
                w.write_record([
                    r.sweep.to_string(),
                    r.value.to_string(),
                    format!("{:.6}", r.ssim),
                    format!("{:.4}", r.psnr),
                    format!("{:.6}", r.frechet),
                ])
            })
        })
        .and_then(|_| w.flush().map_err(csv::Error::from))
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))
}
