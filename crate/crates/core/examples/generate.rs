//! Generates a small synthetic dataset and writes it in the on-disk format.
//!
//! `cargo run --release --example generate -- /tmp/synth`

use cycle_align::io::{load_dataset, write_dataset};
use cycle_align::synth::{generate_dataset, oracle_alignment, SynthConfig};

fn main() -> cycle_align::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth-data".into());
    let cfg = SynthConfig { seed: 7, ..SynthConfig::default() };
    let dataset = generate_dataset(&cfg)?;
    let manifest = write_dataset(&dataset, out.as_ref())?;
    let reloaded = load_dataset(&manifest)?;
    assert_eq!(reloaded.videos.len(), dataset.videos.len());

    let (v, w) = (&dataset.videos[0], &dataset.videos[1]);
    let oracle = oracle_alignment(v, w)?;
    println!("wrote {} videos to {}", dataset.videos.len(), manifest.display());
    for t in &v.tracks {
        println!("{} track {} <-> {} track {:?}", v.video_id, t.track_id, w.video_id, oracle.track_for(t.track_id));
    }
    Ok(())
}
