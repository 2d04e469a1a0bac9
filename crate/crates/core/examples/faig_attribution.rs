//! Which layers did fine-tuning change in a way that matters? Integrated gradients
//! along the straight path from the pre-trained to the fine-tuned weights.
//!
//! cargo run --release --example faig_attribution

use anyhow::Result;
use colora_lab::degrade::{DegradationKind, DegradeConfig};
use colora_lab::faig::{completeness_residual, faig_scores, probe_loss, Probe};
use colora_lab::harness::data::{stream_rng, synthetic_image, Pair};
use colora_lab::harness::{finetune, pretrain, Strategy, TrainConfig, Tuned};
use colora_lab::degrade::{apply_recipe, sample_recipe};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let clean: Vec<_> = (0..24).map(|_| synthetic_image(&mut rng, 48, 48)).collect();
    let mut cfg = TrainConfig {
        steps: 300,
        ..Default::default()
    };
    cfg.task.noise_sigma = [1.0, 15.0];
    let (base, _) = pretrain(&cfg, &clean)?;

    // a noise band the base never saw
    let task = DegradeConfig {
        max_depth: 1,
        kinds: vec![DegradationKind::Noise],
        noise_sigma: [25.0, 30.0],
        poisson_noise: false,
    };
    let pairs: Vec<Pair> = clean
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let recipe = sample_recipe(&mut stream_rng(9, i), &task)?;
            Ok(Pair {
                name: format!("{i}"),
                degraded: apply_recipe(c, &recipe)?,
                clean: c.clone(),
            })
        })
        .collect::<colora_lab::Result<_>>()?;
    let ft = TrainConfig {
        steps: 150,
        strategy: Strategy::Full,
        task,
        ..cfg
    };
    let Tuned::Checkpoint(tuned) = finetune(&ft, &base, &pairs, None)?.model else { unreachable!() };

    let probe = Probe::from_pairs(&pairs[..4].iter().map(|p| (p.degraded.clone(), p.clean.clone())).collect::<Vec<_>>())?;
    println!("probe loss: base {:.3}, fine-tuned {:.3}", probe_loss(&base, &probe)?, probe_loss(&tuned, &probe)?);
    for m in [10, 50] {
        println!("completeness residual at M={m}: {:.2e}", completeness_residual(&base, &tuned, &probe, m)?);
    }

    let report = faig_scores(&base, &tuned, &probe, 50)?;
    println!("{:>8} {:>10} {:>6}", "stage", "mean", "norm");
    for (stage, v) in &report.per_stage {
        let norm = report.normalized.values.get(stage).map_or("-".into(), |n| format!("{n:.3}"));
        println!("{stage:>8} {v:>10.3e} {norm:>6}");
    }
    let mut layers: Vec<_> = report.per_layer.iter().collect();
    layers.sort_by(|a, b| b.1.total_cmp(a.1));
    println!("top layers:");
    for (id, v) in layers.iter().take(5) {
        println!("  {id} {v:.3e}");
    }
    Ok(())
}
