//! Manual throughput probes; run with `--ignored --nocapture` when tuning.

use bfr_core::diffusion::{gaussian_image, LossKind};
use bfr_core::nn::{seeded_rng, NoisePredictor, NoisePredictorConfig};
use std::time::Instant;

#[test]
#[ignore]
fn gemm_throughput() {
    for &(m, k, n) in &[(16usize, 144usize, 4096usize), (32, 288, 16384), (8, 72, 200704), (64, 576, 65536)] {
        let a = vec![1.0f32; m * k];
        let b = vec![1.0f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let start = Instant::now();
        let reps = (2e9 / (2.0 * m as f64 * k as f64 * n as f64)).ceil() as usize;
        for _ in 0..reps.max(1) {
            unsafe {
                <f32 as bfr_core::nn::Real>::gemm(
                    m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
                    c.as_mut_ptr(), n as isize, 1,
                );
            }
        }
        let secs = start.elapsed().as_secs_f64();
        let gflops = 2.0 * (m * k * n * reps.max(1)) as f64 / secs / 1e9;
        println!("gemm f32 {m}x{k}x{n}: {gflops:.2} GFLOP/s");
    }
}

#[test]
#[ignore]
fn unet_eval_throughput() {
    // candidate texture/super-resolution model at 64x64
    let cfg = NoisePredictorConfig {
        resolution: 64,
        conditional: true,
        in_channels: 6,
        out_channels: 3,
        inner_channels: 12,
        channel_multipliers: vec![1, 2, 4],
        attention_resolutions: vec![],
        time_embedding_dim: 64,
        res_blocks_per_level: 1,
        learned_variance: false,
    };
    let model: NoisePredictor<f32> = NoisePredictor::build(cfg, 0).unwrap();
    println!("64x64 model params: {}", model.param_count());
    let mut rng = seeded_rng(1);
    let bs = 12;
    let noisy: Vec<_> = (0..bs).map(|_| gaussian_image(&mut rng, 3, 64, 64)).collect();
    let conds: Vec<_> = (0..bs).map(|_| gaussian_image(&mut rng, 3, 64, 64)).collect();
    let ts = vec![100usize; bs];

    use bfr_core::nn::EpsModel;
    let start = Instant::now();
    let reps = 4;
    for _ in 0..reps {
        let _ = model.predict_batch(&noisy, 100, Some(&conds)).unwrap();
    }
    let per_eval = start.elapsed().as_secs_f64() / (reps * bs) as f64;
    println!("64x64 infer: {:.2} ms/sample (batch {bs})", per_eval * 1e3);

    let targets: Vec<_> = (0..bs).map(|_| gaussian_image(&mut rng, 3, 64, 64)).collect();
    let start = Instant::now();
    for _ in 0..reps {
        let _ = model
            .loss_and_grad(&noisy, Some(&conds), &ts, &targets, LossKind::L1, true)
            .unwrap();
    }
    let per_step = start.elapsed().as_secs_f64() / (reps * bs) as f64;
    println!("64x64 fwd+bwd: {:.2} ms/sample (batch {bs})", per_step * 1e3);
}

#[test]
#[ignore]
fn unet_28_throughput() {
    let cfg = NoisePredictorConfig {
        resolution: 28,
        conditional: false,
        in_channels: 1,
        out_channels: 1,
        inner_channels: 8,
        channel_multipliers: vec![1, 2],
        attention_resolutions: vec![],
        time_embedding_dim: 32,
        res_blocks_per_level: 1,
        learned_variance: false,
    };
    let model: NoisePredictor<f32> = NoisePredictor::build(cfg, 0).unwrap();
    println!("28x28 model params: {}", model.param_count());
    let mut rng = seeded_rng(1);
    let bs = 96;
    let noisy: Vec<_> = (0..bs).map(|_| gaussian_image(&mut rng, 1, 28, 28)).collect();
    use bfr_core::nn::EpsModel;
    let start = Instant::now();
    let reps = 4;
    for _ in 0..reps {
        let _ = model.predict_batch(&noisy, 100, None).unwrap();
    }
    let per_eval = start.elapsed().as_secs_f64() / (reps * bs) as f64;
    println!("28x28 infer: {:.3} ms/sample (batch {bs})", per_eval * 1e3);
}
