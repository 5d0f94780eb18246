//! Aligns two videos: temporal frame pairs, track matches and patch matches.
//!
//! `cargo run --release --example align`

use cycle_align::align::{align_pair, AlignConfig};
use cycle_align::embed::RawFeatures;
use cycle_align::synth::{generate_dataset, SynthConfig};

fn main() -> cycle_align::Result<()> {
    // An easy dataset, so raw features already align well.
    let cfg = SynthConfig { video_offset_scale: 0.0, distractor_scale: 0.3, ..SynthConfig::default() };
    let dataset = generate_dataset(&cfg)?;
    let (v, w) = (&dataset.videos[0], &dataset.videos[1]);
    let report = align_pair(v, w, &RawFeatures, &AlignConfig::default())?;

    println!("{} -> {}", report.query_id, report.reference_id);
    for p in &report.frame_pairs {
        let (a, b) = (p.query_frame as usize, p.reference_frame as usize);
        let theta = |c: &cycle_align::model::VideoClip, f: usize| c.latent_state.as_ref().map_or(f64::NAN, |l| l[f]);
        println!(
            "  frame {a:>2} (progress {:.2}) <-> frame {b:>2} (progress {:.2})  sim {:.3}",
            theta(v, a),
            theta(w, b),
            p.similarity
        );
    }
    for m in &report.track_matches {
        println!("  track {} -> {:?} (score {:?})", m.query_track, m.reference_track, m.score);
    }
    Ok(())
}
