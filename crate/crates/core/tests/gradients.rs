use cycle_align::embed::{finite_diff_check, EmbedParams, GradBuffer, HeadDims};
use cycle_align::model::{BoundingBox, Dataset, PatchRef, Track, VideoClip};
use cycle_align::synth::{generate_dataset, SynthConfig};
use cycle_align::train::{
    batch_loss, batch_loss_value, gradient_check, init_params, margin_loss, run_rng, sample_training_batch, Endpoint,
    TrainConfig, TrainingSample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn full_chain_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let r = gradient_check(seed, 300).unwrap();
        assert!(r.coords_checked >= 200);
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

fn small_problem(seed: u64) -> (Dataset, TrainConfig, EmbedParams, Vec<TrainingSample>) {
    let ds = generate_dataset(&SynthConfig {
        videos_per_class: 2,
        frames_per_video: 10,
        parts_per_video: 3,
        feature_dim: 12,
        seed,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        hidden_dim: 12,
        embed_dim: 12,
        batch_pairs: 2,
        num_chunks: 6,
        seed,
        ..Default::default()
    };
    let params = init_params(&cfg, ds.feature_dim);
    let batch = sample_training_batch(&ds, &cfg, &mut run_rng(seed, 1)).unwrap();
    (ds, cfg, params, batch.samples)
}

#[test]
fn transposed_second_layer_gradient_is_caught() {
    let (ds, cfg, params, samples) = small_problem(4);
    let good = batch_loss(&ds, &samples, &params, &cfg).unwrap();
    let mut bad: GradBuffer = good.grads.clone();
    let n = params.dims.hidden;
    assert_eq!(n, params.dims.output);
    for r in 0..n {
        for c in 0..n {
            bad.w2[r * n + c] = good.grads.w2[c * n + r];
        }
    }
    let loss = |p: &EmbedParams| batch_loss_value(&ds, &samples, p, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let total = params.num_params();
    let ok = finite_diff_check(&params, loss, &good.grads, total, 1e-5, &mut rng);
    let caught = finite_diff_check(&params, loss, &bad, total, 1e-5, &mut rng);
    assert!(ok.max_rel_error < 1e-4, "{ok:?}");
    assert!(caught.max_rel_error > 1e-2, "{caught:?}");
}

fn one_hot_clip(id: &str, tracks: usize, frames: u32, dim: usize, feature: impl Fn(usize) -> Vec<f32>) -> VideoClip {
    VideoClip {
        video_id: id.into(),
        class_label: "c".into(),
        num_frames: frames,
        tracks: (0..tracks)
            .map(|t| Track {
                track_id: t as u32,
                patches: (0..frames)
                    .map(|f| PatchRef {
                        track_id: t as u32,
                        frame_id: f,
                        bbox: BoundingBox { x: 50.0 * t as f32, y: 0.0, w: 20.0, h: 20.0 },
                        feature: {
                            let v = feature(t);
                            assert_eq!(v.len(), dim);
                            v
                        },
                        part_label: Some(t as u32),
                    })
                    .collect(),
            })
            .collect(),
        latent_state: None,
        keypoints: None,
    }
}

fn identity_head(d: usize) -> EmbedParams {
    let mut p = EmbedParams::zeros(HeadDims { input: d, hidden: d, output: d });
    for r in 0..d {
        p.w1[r * d + r] = 1.0;
        p.w2[r * d + r] = 1.0;
    }
    p
}

fn sample_for(ds: &Dataset) -> TrainingSample {
    let v = &ds.videos[0];
    let endpoint = |k: usize| Endpoint {
        bbox: v.tracks[k].patches[0].bbox,
        feature: v.tracks[k].patches[0].feature.clone(),
        track: Some(k),
    };
    TrainingSample {
        v: 0,
        w: 1,
        v_frames: (0..8).collect(),
        w_frames: (0..8).collect(),
        anchor_track: 0,
        anchor_pos: 0,
        positives: vec![endpoint(0)],
        negatives: (1..v.tracks.len()).map(endpoint).collect(),
    }
}

#[test]
fn identical_features_cost_exactly_the_margin() {
    let clip = |id| one_hot_clip(id, 4, 8, 4, |_| vec![0.5, 0.25, 1.0, 0.75]);
    let ds = Dataset::new(4, vec![clip("a"), clip("b")]).unwrap();
    let cfg = TrainConfig::default();
    let out = margin_loss(&ds, &sample_for(&ds), &identity_head(4), &cfg).unwrap();
    assert_eq!(out.loss, cfg.margin);
    assert!(!out.skipped);
}

#[test]
fn satisfied_margin_gives_zero_loss_and_gradient() {
    let one_hot = |t: usize| {
        let mut v = vec![0.0; 4];
        v[t] = 1.0;
        v
    };
    let ds = Dataset::new(4, vec![one_hot_clip("a", 4, 8, 4, one_hot), one_hot_clip("b", 4, 8, 4, one_hot)]).unwrap();
    for hard in [false, true] {
        // Soft κ+ is about 1.42 and κ- at most 1 here, so a margin of 0.4 is satisfied.
        let cfg = TrainConfig { hard_negative_kappa: hard, margin: 0.4, ..Default::default() };
        let out = margin_loss(&ds, &sample_for(&ds), &identity_head(4), &cfg).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.unwrap().is_zero());
        assert!(out.kappa_pos[0] - out.kappa_neg.iter().cloned().fold(f64::MIN, f64::max) >= cfg.margin);
    }
}

#[test]
fn random_batches_are_finite_and_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..25u64 {
        let synth = SynthConfig {
            videos_per_class: rng.random_range(2..4),
            frames_per_video: rng.random_range(8..16),
            parts_per_video: rng.random_range(2..5),
            feature_dim: 8,
            distractor_scale: rng.random_range(0.0..5.0),
            seed: case,
            ..Default::default()
        };
        let ds = generate_dataset(&synth).unwrap();
        let cfg = TrainConfig {
            hidden_dim: 6,
            embed_dim: 5,
            batch_pairs: 3,
            num_chunks: rng.random_range(4..9),
            min_segment_len: rng.random_range(1..5),
            temporal_search: rng.random_bool(0.7),
            hard_negative_kappa: rng.random_bool(0.3),
            seed: case,
            ..Default::default()
        };
        let params = init_params(&cfg, ds.feature_dim);
        let batch = sample_training_batch(&ds, &cfg, &mut run_rng(case, 1)).unwrap();
        let out = batch_loss(&ds, &batch.samples, &params, &cfg).unwrap();
        assert!(out.loss.is_finite() && out.loss >= 0.0);
        assert!(out.grads.is_finite());
        assert_eq!(out.used + out.skipped, batch.samples.len());
        let value = batch_loss_value(&ds, &batch.samples, &params, &cfg).unwrap();
        assert!((out.loss - value).abs() <= 1e-12 * value.abs().max(1.0), "{} vs {value}", out.loss);
    }
}
