//! Writes an MMCK checkpoint, reads it back, and shows what `inspect` prints.

use avmult::cli::{cmd_inspect, Architecture, Checkpoint, CheckpointKind, CheckpointMeta, ExperimentConfig, InspectArgs};
use avmult::mult::MultModel;
use avmult::numerics::AdamState;

fn main() -> avmult::Result<()> {
    let exp = ExperimentConfig::load(None, Some("tiny"), Some(4))?;
    let model = MultModel::build(&exp.model, exp.seed)?;
    let meta = CheckpointMeta {
        kind: CheckpointKind::Pretrain,
        architecture: Architecture::Mult,
        task: None,
        experiment: exp.clone(),
        epoch: 0,
        best_epoch: 0,
        best_val: None,
        adam_step: Some(0),
        seed: exp.seed,
        fingerprint: "none".into(),
    };
    let ckpt = Checkpoint::new(meta, &model.params, Some(&AdamState::new(&model.params)));
    let path = std::env::temp_dir().join("avmult_example.mmck");
    ckpt.save(&path)?;
    let bytes = std::fs::read(&path)?;
    println!("{} bytes, re-encodes identically: {}", bytes.len(), Checkpoint::decode(&bytes)?.encode() == bytes);
    cmd_inspect(&InspectArgs { ckpt: path }, &mut std::io::stdout())?;

    let mut corrupt = bytes.clone();
    corrupt.truncate(bytes.len() / 2);
    println!("truncated file: {}", Checkpoint::decode(&corrupt).unwrap_err());
    Ok(())
}
