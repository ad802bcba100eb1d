//! Preprocessing of a raw audio/visual pair, then a synthetic corpus written
//! to disk as MMF1 containers plus a JSONL manifest and read back.

use avmult::attention::Modality;
use avmult::data::{
    dataset_fingerprint, generate_synthetic, load_dataset, split, write_dataset, Alignment, FeatureSequence, FrameRate, PipelineConfig,
    SplitScheme, SyntheticSpec,
};
use avmult::numerics::Tensor;

fn main() -> avmult::Result<()> {
    // 4 s of 100 Hz audio and 30 Hz video, with a stretch of poor face tracking
    let audio = FeatureSequence::new(Modality::Audio, FrameRate::hz(100), Tensor::from_fn(&[400, 3], |i| (i % 7) as f32), None)?;
    let conf: Vec<f32> = (0..120).map(|i| if (40..60).contains(&i) { 0.5 } else { 0.95 }).collect();
    let visual = FeatureSequence::new(Modality::Visual, FrameRate::hz(30), Tensor::from_fn(&[120, 2], |i| i as f32), Some(conf))?;
    let pipeline = PipelineConfig::default();
    match pipeline.run("clip", "spk", &audio, &visual)? {
        Alignment::Accepted(r) => println!("accepted: {} frames at {} Hz, visual confidence {:?}", r.len(), r.audio.frame_rate.as_f64(), r.visual.confidence),
        Alignment::Rejected { reason, .. } => println!("rejected: {reason}"),
    }
    let short = FeatureSequence::new(Modality::Visual, FrameRate::hz(30), Tensor::zeros(&[60, 2]), None)?;
    if let Alignment::Rejected { reason, .. } = pipeline.run("clip2", "spk", &audio, &short)? {
        println!("rejected: {reason}");
    }

    let spec = SyntheticSpec { n_utterances: 200, n_speakers: 20, ..SyntheticSpec::default() };
    let records = generate_synthetic(&spec)?;
    let dir = std::env::temp_dir().join("avmult_synth_example");
    write_dataset(&dir, &records)?;
    let back = load_dataset(&dir)?;
    println!("{} utterances written to {}, read back identical: {}", back.len(), dir.display(), back == records);
    println!("fingerprint {}", dataset_fingerprint(&back));
    let parts = split(&back, &SplitScheme::speaker_60_20_20(0))?;
    println!("speaker-disjoint split: {} / {} / {}", parts.train.len(), parts.validation.len(), parts.test.len());
    Ok(())
}
