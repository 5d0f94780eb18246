//! Ranks every video of a pool against a query by summed best frame similarity.
//!
//! `cargo run --release --example retrieve`

use cycle_align::align::retrieve_videos;
use cycle_align::embed::RawFeatures;
use cycle_align::synth::{generate_dataset, SynthConfig};

fn main() -> cycle_align::Result<()> {
    let dataset = generate_dataset(&SynthConfig::default())?;
    let pool: Vec<_> = dataset.videos.iter().collect();
    let query = &dataset.videos[3];
    let result = retrieve_videos(query, &pool, &RawFeatures);
    println!("query {}", query.video_id);
    for (rank, e) in result.ranking.iter().enumerate() {
        println!("{:>3} {} {:.4}", rank + 1, e.video_id, e.score);
    }
    Ok(())
}
