//! Cosine annealing and AdamW on a toy least-squares problem.

use std::collections::BTreeMap;

use anyhow::Result;
use colora_lab::harness::{cosine_lr, AdamW, AdamWConfig};
use colora_lab::Tensor;

fn main() -> Result<()> {
    let total = 200;
    for step in [0, 50, 100, 150, 200] {
        println!("lr({step:>3}) = {:.3e}", cosine_lr(step, total, 1e-3, 1e-6)?);
    }

    // fit w to a target vector; the name marks it as a decayed conv weight
    let name = "intro.0.conv_weight".to_string();
    let target = Tensor::new(&[4], vec![0.5f32, -1.0, 2.0, 0.25])?;
    let mut w = Tensor::<f32>::zeros(&[4]);
    let mut opt = AdamW::new(AdamWConfig::default());
    for step in 0..total {
        let grad = w.sub(&target)?.scale(2.0);
        let lr = cosine_lr(step, total, 5e-2, 1e-4)?;
        opt.step(vec![(name.clone(), &mut w)], &BTreeMap::from([(name.clone(), grad)]), lr)?;
        if step % 40 == 0 {
            println!("step {step:>3}: |w - target|∞ = {:.4}", w.max_abs_diff(&target)?);
        }
    }
    println!("final w = {:?}", w.data());
    Ok(())
}
