//! Builds the BASE and LARGE presets under both fusion wirings and prints
//! their parameter counts, broken down per component.
//!
//! ```bash
//! cargo run --release -p avmult --example parameter_counts
//! ```

use avmult::mult::{parameter_breakdown, FusionWiring, ModelConfig, MultModel, REPORTED_BASE_PARAMS, REPORTED_LARGE_PARAMS};

fn report(label: &str, config: &ModelConfig, reported: f64) -> avmult::Result<()> {
    let model = MultModel::build(config, 0)?;
    let total = model.parameter_count();
    println!(
        "{label:<16} {:>12} params ({:.2}M, reported {:.1}M, {:+.2}%)",
        total,
        total as f64 / 1e6,
        reported / 1e6,
        100.0 * (total as f64 - reported) / reported
    );
    for (group, n) in parameter_breakdown(&model.params) {
        println!("    {group:<12} {n:>12}");
    }
    Ok(())
}

fn main() -> avmult::Result<()> {
    report("BASE/concat", &ModelConfig::base(), REPORTED_BASE_PARAMS)?;
    report("BASE/project", &ModelConfig { fusion: FusionWiring::Project, ..ModelConfig::base() }, REPORTED_BASE_PARAMS)?;
    report("LARGE/concat", &ModelConfig::large(), REPORTED_LARGE_PARAMS)?;
    report("LARGE/project", &ModelConfig { fusion: FusionWiring::Project, ..ModelConfig::large() }, REPORTED_LARGE_PARAMS)?;
    Ok(())
}
