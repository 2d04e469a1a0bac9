//! What each fine-tuning strategy trains, on the desk model and a larger one.

use anyhow::Result;
use colora_lab::colora::plan_ranks;
use colora_lab::harness::{strategy_tuned_count, Strategy};
use colora_lab::{ModelSpec, Stage};

fn main() -> Result<()> {
    let larger = ModelSpec {
        width: 16,
        enc_blocks: vec![1, 1, 2, 4],
        middle_blocks: 6,
        dec_blocks: vec![1, 1, 1, 1],
    };
    for spec in [ModelSpec::default(), larger] {
        // encoder and decoder matter, the middle barely does
        let scores = spec
            .stages()
            .into_iter()
            .filter(|s| !s.is_boundary())
            .map(|s| (s, if s == Stage::Middle { 0.1 } else { 0.8 }))
            .collect();
        let plan = plan_ranks(&scores, 1.0, 0.2, &spec, 1)?;
        println!("{} parameters", spec.param_count());
        for s in [
            Strategy::Full,
            Strategy::Colora,
            Strategy::LoraFixed { rank: 16 },
            Strategy::DecoderOnly,
            Strategy::BiasNormOnly,
        ] {
            let c = strategy_tuned_count(s, &spec, Some(&plan))?;
            println!("  {:>16} {:>8} {:>6.2}%", s.to_string(), c.count, 100.0 * c.fraction);
        }
    }
    Ok(())
}
