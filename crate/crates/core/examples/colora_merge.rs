//! Contribution-based ranks: stage scores become per-layer ranks, adapters attach
//! to a frozen base, and merging folds them back with no change in output.

use anyhow::Result;
use colora_lab::colora::{adapted_forward, merge, plan_ranks, tuned_param_count, AdapterSet, RankPlan};
use colora_lab::{Checkpoint, ModelSpec, Stage, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let spec = ModelSpec::default();
    let base = Checkpoint::<f32>::build(&spec, 0)?;
    let scores = [
        (Stage::Enc(1), 0.94),
        (Stage::Enc(2), 0.48),
        (Stage::Middle, 0.09),
        (Stage::Dec(1), 0.65),
        (Stage::Dec(2), 1.0),
    ]
    .into_iter()
    .collect();
    let plan = plan_ranks(&scores, 1.0, 0.2, &spec, 1)?;
    for (stage, delta) in &plan.per_stage_delta {
        println!("{stage:>7}: delta {delta:.3}");
    }
    for (id, r) in &plan.per_layer_rank {
        println!("  {id:<28} rank {r}");
    }
    let colora = tuned_param_count(&plan, &spec)?;
    let lora = tuned_param_count(&RankPlan::fixed(&spec, 16)?, &spec)?;
    println!("tuned: colora {} ({:.1}%), lora r=16 {} ({:.1}%)", colora.count, 100.0 * colora.fraction, lora.count, 100.0 * lora.fraction);

    // pretend training moved every B factor and extra
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut set = AdapterSet::attach(&base, &plan, 0)?;
    for (name, t) in set.named_mut() {
        if !name.ends_with(".lora_a") {
            *t = t.add(&Tensor::uniform(t.shape(), -0.05, 0.05, &mut rng))?;
        }
    }
    let merged = merge(&base, &set)?;
    let x = Tensor::<f32>::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let adapted = adapted_forward(&base, &set, &x)?;
    println!("adapted vs base: {:.3}", adapted.max_abs_diff(&base.forward(&x)?)?);
    println!("merged vs adapted: {:.2e}", merged.forward(&x)?.max_abs_diff(&adapted)?);
    println!(
        "adapter file {} bytes, checkpoint {} bytes",
        set.to_bytes()?.len(),
        merged.to_bytes()?.len()
    );
    Ok(())
}
