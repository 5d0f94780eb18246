//! Independent reference implementations used by the integration and acceptance tests.
#![allow(dead_code)]

use cycle_align::cycle::{kappa, CycleOptions, KappaMode, SequenceView};
use cycle_align::embed::{cosine_sim, Embed, EmbedParams, HeadDims, RawFeatures};
use cycle_align::model::{BoundingBox, PatchRef, Track, VideoClip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A clip whose tracks sit far apart; `present(track, frame)` decides which patches exist.
pub fn clip(
    id: &str,
    frames: u32,
    tracks: usize,
    dim: usize,
    rng: &mut impl Rng,
    mut present: impl FnMut(usize, u32) -> bool,
) -> VideoClip {
    let tracks = (0..tracks)
        .map(|t| Track {
            track_id: t as u32,
            patches: (0..frames)
                .filter(|&f| present(t, f))
                .map(|f| PatchRef {
                    track_id: t as u32,
                    frame_id: f,
                    bbox: BoundingBox { x: 40.0 * t as f32, y: 0.0, w: 16.0, h: 16.0 },
                    feature: (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                    part_label: Some(t as u32),
                })
                .collect(),
        })
        .filter(|t: &Track| !t.patches.is_empty())
        .collect();
    VideoClip {
        video_id: id.into(),
        class_label: "c".into(),
        num_frames: frames,
        tracks,
        latent_state: None,
        keypoints: None,
    }
}

/// Best cycle score by explicit enumeration over frames and tracks, looking patches up
/// by frame id. Mirrors the cycle definition rather than the library's index tables.
pub fn brute_force_kappa(
    v: &VideoClip,
    v_frames: &[u32],
    w: &VideoClip,
    w_frames: &[u32],
    i: usize,
    k: usize,
    m: usize,
    embedder: &dyn Embed,
    opts: CycleOptions,
) -> Option<f64> {
    let at = |video: &VideoClip, frames: &[u32], pos: usize, track: usize| video.tracks[track].patch_at(frames[pos]).cloned();
    let emb = |p: &PatchRef| embedder.embed(&p.feature);
    at(v, v_frames, m, i)?;
    let end = at(v, v_frames, m, k)?;
    let span = opts.min_segment_len.max(1) - 1;
    let mut best: Option<f64> = None;
    let mut consider = |n: usize, j: usize, p: usize, q: usize| {
        let (Some(vn), Some(wq), Some(wp)) = (at(v, v_frames, n, i), at(w, w_frames, q, j), at(w, w_frames, p, j)) else {
            return;
        };
        let s = cosine_sim(&emb(&vn), &emb(&wq)) + cosine_sim(&emb(&wp), &emb(&end));
        if best.is_none_or(|b| s > b) {
            best = Some(s);
        }
    };
    if opts.temporal_search {
        for n in 0..v_frames.len() {
            for j in 0..w.tracks.len() {
                for p in 0..w_frames.len() {
                    for q in 0..w_frames.len() {
                        if n > m && q >= p && q - p + 1 >= opts.min_segment_len {
                            consider(n, j, p, q);
                        }
                    }
                }
            }
        }
    } else {
        let n = m + span.max(1);
        if n < v_frames.len() && n < w_frames.len() {
            for j in 0..w.tracks.len() {
                consider(n, j, m, n);
            }
        }
    }
    best
}

/// Number of positions of `view` in which track `i` is present.
pub fn presence(view: &SequenceView, i: usize) -> usize {
    (0..view.len()).filter(|&p| view.has(p, i)).count()
}

/// All strictly increasing `k`-subsets of `0..n`.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for x in start..n {
            cur.push(x);
            rec(x + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive best strictly monotone `k`-matching; sums left to right from 0.
pub fn brute_force_alignment(grid: &[Vec<f64>], k: usize) -> (f64, usize) {
    let rows = combinations(grid.len(), k);
    let cols = combinations(grid[0].len(), k);
    let mut best = f64::NEG_INFINITY;
    let mut count = 0;
    for r in &rows {
        for c in &cols {
            count += 1;
            let s = r.iter().zip(c).fold(0.0, |acc, (&a, &b)| acc + grid[a][b]);
            best = best.max(s);
        }
    }
    (best, count)
}

/// Γ straight from its definition, without any overflow guard.
pub fn naive_gamma(x: &[f64]) -> f64 {
    let num: f64 = x.iter().map(|v| v * v.exp()).sum();
    let den: f64 = x.iter().map(|v| v.exp()).sum();
    num / den
}

/// Property checks for one Γ implementation on one vector; returns a failure description.
pub fn gamma_properties(gamma: impl Fn(&[f64]) -> f64, x: &[f64], shift: f64, rng: &mut impl Rng) -> Result<(), String> {
    let g = gamma(x);
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo <= g && g <= hi) {
        return Err(format!("bounds: {g} not in [{lo}, {hi}] for {x:?}"));
    }
    let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
    let gs = gamma(&shifted);
    if (gs - (g + shift)).abs() > 1e-9 {
        return Err(format!("shift: Γ(x+{shift}) = {gs}, Γ(x)+{shift} = {}", g + shift));
    }
    let mut perm = x.to_vec();
    for a in (1..perm.len()).rev() {
        perm.swap(a, rng.random_range(0..=a));
    }
    let gp = gamma(&perm);
    if (gp - g).abs() > 1e-12 * (1.0 + g.abs()) {
        return Err(format!("permutation: {gp} vs {g}"));
    }
    let single = gamma(&x[..1]);
    if single != x[0] {
        return Err(format!("singleton: Γ([{}]) = {single}", x[0]));
    }
    Ok(())
}

fn random_frames(rng: &mut ChaCha8Rng, num_frames: u32, count: usize) -> Vec<u32> {
    let mut all: Vec<u32> = (0..num_frames).collect();
    for a in (1..all.len()).rev() {
        all.swap(a, rng.random_range(0..=a));
    }
    let mut f = all[..count].to_vec();
    f.sort_unstable();
    f
}

/// Runs `instances` random κ problems and returns how many matched the oracle exactly.
pub fn kappa_instances(instances: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = EmbedParams::init(HeadDims { input: 6, hidden: 8, output: 5 }, &mut rng);
    let mut agree = 0;
    let mut non_empty = 0;
    for t in 0..instances {
        let (fv, fw) = (rng.random_range(2..=5usize), rng.random_range(1..=5usize));
        let (tv, tw) = (rng.random_range(1..=4usize), rng.random_range(1..=4usize));
        let v = clip("v", 8, tv, 6, &mut rng, |_, _| true);
        let mut r2 = ChaCha8Rng::seed_from_u64(seed ^ (t as u64 + 1));
        let w = clip("w", 8, tw, 6, &mut rng, |_, _| r2.random_bool(0.8));
        let (v_frames, w_frames) = (random_frames(&mut rng, 8, fv), random_frames(&mut rng, 8, fw));
        let opts = CycleOptions {
            min_segment_len: rng.random_range(1..=4),
            temporal_search: rng.random_bool(0.8),
        };
        let (i, k, m) = (rng.random_range(0..v.tracks.len()), rng.random_range(0..v.tracks.len()), rng.random_range(0..fv));
        let vv = SequenceView::new(&v, v_frames.clone());
        let wv = SequenceView::new(&w, w_frames.clone());
        let ok = if t % 2 == 0 {
            let got = kappa(&vv, &wv, i, k, m, &RawFeatures, KappaMode::Hard, opts);
            got == brute_force_kappa(&v, &v_frames, &w, &w_frames, i, k, m, &RawFeatures, opts)
        } else {
            let got = kappa(&vv, &wv, i, k, m, &head, KappaMode::Hard, opts);
            got == brute_force_kappa(&v, &v_frames, &w, &w_frames, i, k, m, &head, opts)
        };
        agree += ok as usize;
        non_empty += kappa(&vv, &wv, i, k, m, &RawFeatures, KappaMode::Hard, opts).is_some() as usize;
    }
    assert!(non_empty > instances / 3, "too few instances with a feasible cycle: {non_empty}");
    (agree, instances)
}
