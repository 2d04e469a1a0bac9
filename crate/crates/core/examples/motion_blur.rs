//! Motion-blur kernels from random camera trajectories, drawn as ASCII.

use anyhow::Result;
use colora_lab::degrade::{sample_step, DegradationKind, DegradationStep, DegradeConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = DegradeConfig::default();
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for _ in 0..3 {
        let step = sample_step(&mut rng, DegradationKind::MotionBlur, &cfg);
        let DegradationStep::MotionBlur { size, trajectory } = &step else { unreachable!() };
        let kernel = step.kernel()?.expect("motion blur has a kernel");
        let peak = kernel.weights.iter().copied().fold(0.0, f64::max);
        println!("size {size}, {} trajectory vertices, sum {:.6}", trajectory.len(), kernel.sum());
        for row in kernel.weights.chunks(kernel.size) {
            let line: String = row
                .iter()
                .map(|&w| shades[((w / peak) * 9.0).round() as usize])
                .flat_map(|c| [c, c])
                .collect();
            println!("  |{line}|");
        }
    }
    Ok(())
}
