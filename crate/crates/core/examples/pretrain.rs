//! Random-order degradation pre-training on a synthetic corpus, with a loss curve.
//!
//! cargo run --release --example pretrain -- [steps]

use anyhow::Result;
use colora_lab::harness::data::synthetic_image;
use colora_lab::harness::{pretrain, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(300);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let clean: Vec<_> = (0..32).map(|_| synthetic_image(&mut rng, 64, 64)).collect();
    let mut cfg = TrainConfig {
        steps,
        ..Default::default()
    };
    cfg.task.noise_sigma = [1.0, 15.0];

    let (ckpt, log) = pretrain(&cfg, &clean)?;
    let window = (steps / 10).max(1);
    for (i, chunk) in log.losses.chunks(window).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>5}..{:<5} PSNR {:6.2} dB", i * window, i * window + chunk.len(), -mean);
    }
    println!("{} parameters trained for {} steps", ckpt.param_count(), ckpt.meta.steps);
    Ok(())
}
