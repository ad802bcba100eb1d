//! Pretrained versus freshly initialized backbones on the synthetic
//! classification and regression tasks, at 10% and 100% of the training split.
//!
//! ```bash
//! cargo run --release -p avmult --example transfer -- 0 1 2
//! ```

use avmult::data::{generate_synthetic, split, SplitScheme, SyntheticSpec};
use avmult::mult::ModelConfig;
use avmult::training::{crop_records, transfer_trial};

fn main() -> avmult::Result<()> {
    let seeds: Vec<u64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![0] } else { seeds };
    let config = ModelConfig::tiny();
    for seed in seeds {
        let records = crop_records(&generate_synthetic(&SyntheticSpec { seed, ..SyntheticSpec::default() })?, config.seq_len);
        let parts = split(&records, &SplitScheme::speaker_60_20_20(seed))?;
        for r in transfer_trial(&parts, &config, &[10.0, 100.0], seed)? {
            println!(
                "seed {seed} {:<8} {:>5}%  scratch {:.4}  pretrained {:.4}  gap {:+.4}",
                r.task,
                r.train_fraction,
                r.scratch,
                r.pretrained,
                r.gap()
            );
        }
    }
    Ok(())
}
