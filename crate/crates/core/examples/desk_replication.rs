//! End-to-end run at desk scale: pre-train, fine-tune five ways, attribute, compare.
//!
//! cargo run --release --example desk_replication -- [workdir] [--tiny]

use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use colora_lab::harness::{replicate, ReplicationConfig};

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let tiny = args.iter().any(|a| a == "--tiny");
    let workdir = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("colora-desk"));
    let cfg = if tiny { ReplicationConfig::tiny() } else { ReplicationConfig::default() };

    let start = Instant::now();
    let report = replicate(&cfg, &workdir)?;
    println!("pretrain loss {:.2} -> {:.2}", report.pretrain_first_loss, report.pretrain_last_loss);
    println!("frozen base: {:.2} dB", report.baseline_psnr_rgb);
    for r in &report.strategies {
        println!(
            "{:>16}: {:6.2} dB ({:+.2})  tuned {:>6} ({:.1}%)",
            r.strategy,
            r.psnr_rgb,
            r.gain_db,
            r.tuned.count,
            100.0 * r.tuned.fraction
        );
    }
    println!("normalized FAIG:");
    for (stage, v) in &report.normalized_faig {
        println!("  {stage:>8} {v:.3}");
    }
    println!(
        "enc/dec mean {:.3} vs middle {:.3}; colora {:.1}% vs lora {:.1}%; gap to full {:.2} dB",
        report.enc_dec_mean,
        report.middle,
        100.0 * report.colora_fraction,
        100.0 * report.lora_fraction,
        report.colora_gap_to_full_db
    );
    println!("artifacts in {} ({:.0}s)", workdir.display(), start.elapsed().as_secs_f64());
    Ok(())
}
