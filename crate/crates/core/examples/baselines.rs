//! The GRU and tensor-fusion baselines: parameter budgets next to the BASE
//! transformer, and a short fine-tuning run of each small variant.

use avmult::baselines::{solve_budget, BaselineConfig, BaselineKind};
use avmult::data::{generate_synthetic, split, SplitScheme, SyntheticSpec};
use avmult::mult::REPORTED_BASE_PARAMS;
use avmult::training::{finetune, FinetuneConfig, FinetuneModel, Task, TrainSchedule};

fn main() -> avmult::Result<()> {
    for kind in [BaselineKind::EfGru, BaselineKind::LfGru] {
        let b = solve_budget(kind, 512, 17, 2, REPORTED_BASE_PARAMS, 0.1)?;
        println!("{kind:?} at the BASE budget: hidden {} x {} layers = {} params", b.hidden, b.layers, b.params);
    }

    let spec = SyntheticSpec { n_utterances: 300, n_speakers: 30, t_min: 10, t_max: 10, ..SyntheticSpec::default() };
    let records = generate_synthetic(&spec)?;
    let parts = split(&records, &SplitScheme::speaker_60_20_20(0))?;
    let cfg = FinetuneConfig { schedule: TrainSchedule { peak_lr: 3e-3, batch_size: 16, epochs: 10, ..TrainSchedule::finetune() }, ..FinetuneConfig::default() };
    for kind in [BaselineKind::EfGru, BaselineKind::LfGru, BaselineKind::Tfn] {
        let model = FinetuneModel::baseline(&BaselineConfig::small(kind, spec.audio_dim, spec.visual_dim), Task::Classify { n_classes: 2 }, 0)?;
        let params = model.params.scalar_count();
        let out = finetune(model, &parts.train, &parts.validation, &cfg)?;
        println!("{kind:?}: {params} params, test {:?}", out.model.evaluate(&parts.test)?);
    }
    Ok(())
}
