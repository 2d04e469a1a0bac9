//! Random-order degradation: sample recipes, apply them, write the results and replay one.
//!
//! cargo run --release --example degrade_pipeline -- [outdir]

use std::path::PathBuf;

use anyhow::Result;
use colora_lab::degrade::{apply_recipe, recipe_space_size, sample_recipe, DegradationRecipe, DegradeConfig};
use colora_lab::harness::data::{save_image, synthetic_image};
use colora_lab::harness::{psnr_metric, Domain};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("colora-degrade"));
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let clean = synthetic_image(&mut rng, 96, 96);
    save_image(&out.join("clean.png"), &clean)?;

    let cfg = DegradeConfig::default();
    let space = recipe_space_size(cfg.kinds.len() as u32, cfg.max_depth as u32)?;
    println!("{} kinds, depth ≤ {}: {} kind orderings", cfg.kinds.len(), cfg.max_depth, space.sequences);

    let mut last = None;
    for i in 0..6 {
        let recipe = sample_recipe(&mut rng, &cfg)?;
        let degraded = apply_recipe(&clean, &recipe)?;
        let kinds: Vec<String> = recipe.steps.iter().map(|s| format!("{:?}", s.kind())).collect();
        println!("{i}: {:>5.2} dB  {}", psnr_metric(&degraded, &clean, Domain::Rgb)?, kinds.join(" -> "));
        save_image(&out.join(format!("degraded_{i}.png")), &degraded)?;
        last = Some((recipe, degraded));
    }

    // a recipe is plain data: serialize it and the same image comes back
    let (recipe, degraded) = last.expect("six recipes were sampled");
    let text = serde_json::to_string(&recipe)?;
    let replay = apply_recipe(&clean, &serde_json::from_str::<DegradationRecipe>(&text)?)?;
    println!("replay identical: {}", replay == degraded);
    println!("images in {}", out.display());
    Ok(())
}
