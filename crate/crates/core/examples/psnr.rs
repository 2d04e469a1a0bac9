//! PSNR on RGB and on the BT.601 luma plane, for chroma and luma distortions.

use anyhow::Result;
use colora_lab::harness::data::synthetic_image;
use colora_lab::harness::metrics::luma;
use colora_lab::harness::{psnr_metric, Domain};
use colora_lab::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clean = synthetic_image(&mut rng, 64, 64);
    let plane = 64 * 64;

    // same energy, once along the luma weights and once orthogonal to them
    let w = [0.299f32, 0.587, 0.114];
    let norm = w.iter().map(|v| v * v).sum::<f32>().sqrt();
    let luma_dir = w.map(|v| v / norm);
    let h = w[0].hypot(w[1]);
    let chroma_dir = [w[1] / h, -w[0] / h, 0.0];
    for (label, dir) in [("luma shift", luma_dir), ("chroma shift", chroma_dir)] {
        let shifted = Tensor::from_fn(&[3, 64, 64], |i| (clean.data()[i] + 0.05 * dir[i / plane]).clamp(0.0, 1.0));
        println!(
            "{label:>12}: RGB {:6.2} dB, Y {:6.2} dB",
            psnr_metric(&shifted, &clean, Domain::Rgb)?,
            psnr_metric(&shifted, &clean, Domain::Y)?
        );
    }
    println!("identical: {} dB (capped)", psnr_metric(&clean, &clean, Domain::Y)?);
    println!("luma plane shape {:?}", luma(&clean)?.shape());
    Ok(())
}
