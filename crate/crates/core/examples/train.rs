//! Trains the embedding head on a synthetic dataset and saves a run directory.
//!
//! `cargo run --release --example train -- /tmp/run 300`

use cycle_align::synth::{generate_dataset, SynthConfig};
use cycle_align::train::{train, TrainConfig, TrainRun};

fn main() -> cycle_align::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "train-run".into());
    let iterations = args.next().map_or(200, |s| s.parse().expect("iteration count"));

    let dataset = generate_dataset(&SynthConfig::default())?;
    let cfg = TrainConfig { iterations, checkpoint_every: 100, ..TrainConfig::default() };
    let run = TrainRun { workers: 1, out_dir: Some(out.clone().into()), resume: true };
    let outcome = train(&dataset, &cfg, &run)?;
    for rec in outcome.log.iter().step_by(50) {
        println!("iteration {:>5}  loss {:.4}", rec.iteration, rec.loss);
    }
    println!("checkpoint in {out}");
    Ok(())
}
