//! Evaluates raw features and a briefly trained head on held-out pairs.
//!
//! `cargo run --release --example evaluate -- 200`

use cycle_align::align::AlignConfig;
use cycle_align::embed::RawFeatures;
use cycle_align::eval::{evaluate, same_class_pairs, split_held_out};
use cycle_align::synth::{generate_dataset, SynthConfig};
use cycle_align::train::{train, TrainConfig, TrainRun};

fn main() -> cycle_align::Result<()> {
    let iterations = std::env::args().nth(1).map_or(100, |s| s.parse().expect("iteration count"));
    let dataset = generate_dataset(&SynthConfig::default())?;
    let (train_set, held) = split_held_out(&dataset, 2)?;
    let pairs = same_class_pairs(&dataset, Some(&held));
    let align = AlignConfig::default();

    let cfg = TrainConfig { iterations, ..TrainConfig::default() };
    let params = train(&train_set, &cfg, &TrainRun::default())?.params;
    for (name, report) in [
        ("raw", evaluate(&dataset, &RawFeatures, &pairs, &align)?),
        ("trained", evaluate(&dataset, &params, &pairs, &align)?),
    ] {
        print!("{name}\n{}", report.to_csv()?);
    }
    Ok(())
}
