//! Masked-frame pretraining of the tiny preset on synthetic data, next to the
//! variant whose cross-modal blocks attend to their own modality.

use std::time::Instant;

use avmult::data::{generate_synthetic, split, SplitScheme, SyntheticSpec};
use avmult::mult::{ModelConfig, MultModel};
use avmult::training::{crop_records, pretrain, PretrainConfig};

fn main() -> avmult::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let records = generate_synthetic(&SyntheticSpec { seed, ..SyntheticSpec::default() })?;
    let config = ModelConfig::tiny();
    let records = crop_records(&records, config.seq_len);
    let parts = split(&records, &SplitScheme::speaker_60_20_20(seed))?;
    println!("train {} / validation {} / test {}", parts.train.len(), parts.validation.len(), parts.test.len());

    for cross_modal in [true, false] {
        let cfg = ModelConfig { cross_modal, ..config.clone() };
        let started = Instant::now();
        let model = MultModel::build(&cfg, seed)?;
        let out = pretrain(model, &parts.train, &parts.validation, &PretrainConfig { seed, ..PretrainConfig::default() })?;
        let first = out.val_curve[0];
        let last = *out.val_curve.last().unwrap();
        println!(
            "cross_modal={cross_modal}: val masked L1 epoch 1 {first:.4} → epoch {} {last:.4} ({:.1}% lower), best epoch {}, {:.1}s",
            out.val_curve.len(),
            100.0 * (1.0 - last / first),
            out.state.best_epoch,
            started.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
