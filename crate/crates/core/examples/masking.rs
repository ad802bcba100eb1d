//! Corruption plans: 15% of frames in runs of three, zeroed, replaced or kept.

use avmult::masking::{masking_mode, MaskingConfig, Split, StaticPlans};
use avmult::numerics::Tensor;

fn main() -> avmult::Result<()> {
    let cfg = MaskingConfig::default();
    let train = masking_mode(Split::Train);
    for epoch in 0..3 {
        let plan = cfg.plan(train, 0, epoch, "utt-1", 20)?;
        let runs: Vec<String> = plan.runs.iter().map(|r| format!("{}..{} {:?}", r.start, r.start + r.len, r.tag)).collect();
        println!("train epoch {epoch}: {}", runs.join(", "));
    }
    let val = StaticPlans::build(&cfg, 0, [("utt-2", 20), ("utt-3", 50)])?;
    println!("validation plans fixed for the run, fingerprint {}", &val.fingerprint()[..16]);

    let audio = Tensor::from_fn(&[20, 2], |i| 1.0 + i as f32);
    let visual = Tensor::from_fn(&[20, 1], |i| -(i as f32));
    let plan = cfg.plan(train, 0, 0, "utt-1", 20)?;
    let c = plan.apply(&audio, &visual)?;
    for t in 0..20 {
        let flag = if c.target_mask[t] { "*" } else { " " };
        println!("{t:>2}{flag} audio {:?} visual {:?}", c.audio.row(t), c.visual.row(t));
    }
    Ok(())
}
