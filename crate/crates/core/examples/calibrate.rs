//! Generator calibration: raw-feature accuracy, then trained accuracy with and without
//! temporal search, on held-out pairs.
//!
//! Overrides are `section.key=value` pairs, e.g.
//! `cargo run --release --example calibrate -- synth.distractor_scale=3 train.iterations=500 seeds=0,1,2`

use std::time::Instant;

use cycle_align::align::AlignConfig;
use cycle_align::embed::RawFeatures;
use cycle_align::eval::{evaluate, same_class_pairs, split_held_out};
use cycle_align::synth::{generate_dataset, SynthConfig};
use cycle_align::train::{train, TrainConfig, TrainRun};

fn main() -> cycle_align::Result<()> {
    let mut synth_toml = String::new();
    let mut train_toml = String::new();
    let mut seeds = vec![0u64];
    let mut ablation = true;
    for arg in std::env::args().skip(1) {
        let (key, value) = arg.split_once('=').expect("expected key=value");
        match key.split_once('.') {
            Some(("synth", k)) => synth_toml += &format!("{k} = {value}\n"),
            Some(("train", k)) => train_toml += &format!("{k} = {value}\n"),
            _ if key == "seeds" => seeds = value.split(',').map(|s| s.parse().unwrap()).collect(),
            _ if key == "ablation" => ablation = value.parse().unwrap(),
            _ => panic!("unknown override {arg}"),
        }
    }
    let synth = SynthConfig::from_toml(&synth_toml)?;
    let base = TrainConfig::from_toml(&train_toml)?;
    let dataset = generate_dataset(&synth)?;
    let (train_set, held) = split_held_out(&dataset, 2)?;
    let pairs = same_class_pairs(&dataset, Some(&held));
    let align = AlignConfig::default();

    let raw = evaluate(&dataset, &RawFeatures, &pairs, &align)?;
    println!(
        "raw: track {:.3} spatial {:.3} temporal {:.4}",
        raw.track_correspondence_accuracy, raw.spatial_alignment_accuracy, raw.temporal_alignment_error
    );
    for seed in seeds {
        for temporal_search in [true, false] {
            if !temporal_search && !ablation {
                continue;
            }
            let cfg = TrainConfig { seed, temporal_search, ..base.clone() };
            let start = Instant::now();
            let out = train(&train_set, &cfg, &TrainRun::default())?;
            let secs = start.elapsed().as_secs_f64();
            let r = evaluate(&dataset, &out.params, &pairs, &align)?;
            let fit = evaluate(&train_set, &out.params, &same_class_pairs(&train_set, None), &align)?;
            let tail: f64 = out.log.iter().rev().take(100).map(|l| l.loss).sum::<f64>() / 100f64.min(out.log.len() as f64);
            println!(
                "seed {seed} search {temporal_search}: track {:.3} spatial {:.3} temporal {:.4} loss {:.4} train-pair track {:.3} ({secs:.0}s)",
                r.track_correspondence_accuracy, r.spatial_alignment_accuracy, r.temporal_alignment_error, tail, fit.track_correspondence_accuracy
            );
        }
    }
    Ok(())
}
