//! The restoration network: topology, per-stage parameter budget, and a forward pass.

use anyhow::Result;
use colora_lab::harness::data::synthetic_image;
use colora_lab::{Checkpoint, ModelSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let spec = ModelSpec::default();
    let ckpt = Checkpoint::<f32>::build(&spec, 0)?;
    println!("{spec:?}");
    println!("{} parameters, inputs must be multiples of {}", ckpt.param_count(), spec.downsampling());
    for (stage, ids) in spec.stage_partition() {
        let n: usize = ids.iter().map(|id| ckpt.params[id].numel()).sum();
        println!("  {stage:>7}: {:>2} tensors {n:>6} params", ids.len());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = synthetic_image(&mut rng, 32, 32).reshape(&[1, 3, 32, 32])?;
    let y = ckpt.forward(&x)?;
    println!("forward {:?} -> {:?}, max |y - x| = {:.3}", x.shape(), y.shape(), y.max_abs_diff(&x)?);

    // zeroing the last conv leaves only the global skip
    let mut skip = ckpt.clone();
    for (id, t) in skip.params.iter_mut() {
        if id.stage == colora_lab::Stage::End {
            *t = Tensor::zeros(t.shape());
        }
    }
    println!("with end conv zeroed, output == input: {}", skip.forward(&x)? == x);
    Ok(())
}
