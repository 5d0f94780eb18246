//! Inference-time alignment with a trained (or raw) embedding: patch, track, frame and
//! video level correspondence. Everything here uses hard maxima.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cycle::{CycleOptions, PairSimilarity, SequenceView};
use crate::embed::{cosine_sim, Embed};
use crate::error::{Error, Result};
use crate::model::{sample_frame_sequence, PatchRef, VideoClip};
use crate::train::run_rng;

/// A sequence view together with one embedding per slot.
pub struct EmbeddedSequence<'a> {
    pub view: SequenceView<'a>,
    pub emb: Vec<Vec<f64>>,
}

impl<'a> EmbeddedSequence<'a> {
    pub fn new(view: SequenceView<'a>, embedder: &dyn Embed) -> Self {
        let emb = view.embed_slots(embedder);
        EmbeddedSequence { view, emb }
    }

    /// Every frame of the clip.
    pub fn full(video: &'a VideoClip, embedder: &dyn Embed) -> Self {
        Self::new(SequenceView::new(video, (0..video.num_frames).collect()), embedder)
    }

    pub fn pair<'s>(&'s self, other: &'s EmbeddedSequence<'a>) -> PairSimilarity<'s, 'a> {
        PairSimilarity::new(&self.view, &self.emb, &other.view, &other.emb)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMatch {
    pub frame_id: u32,
    pub track_id: u32,
    pub score: f64,
}

/// Reference patch most similar to `query`; ties go to the lowest `(frame, track id)`.
pub fn correspond_patch(query: &PatchRef, reference: &VideoClip, embedder: &dyn Embed) -> Option<PatchMatch> {
    let q = embedder.embed(&query.feature);
    let mut candidates: Vec<&PatchRef> = reference.tracks.iter().flat_map(|t| &t.patches).collect();
    candidates.sort_by_key(|p| (p.frame_id, p.track_id));
    let mut best: Option<PatchMatch> = None;
    for p in candidates {
        let score = cosine_sim(&q, &embedder.embed(&p.feature));
        if best.is_none_or(|b| score > b.score) {
            best = Some(PatchMatch {
                frame_id: p.frame_id,
                track_id: p.track_id,
                score,
            });
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackMatch {
    /// Track id in the query video.
    pub query_track: u32,
    /// Track id in the reference video.
    pub reference_track: u32,
    pub score: f64,
}

/// The reference track whose best cycle back to the anchor `V^i_m` scores highest.
/// Returns `None` when no cycle from the anchor is feasible.
pub fn correspond_track(sims: &PairSimilarity, i: usize, m: usize, opts: CycleOptions) -> Option<TrackMatch> {
    let table = sims.score_table(i, i, m, opts);
    let mut best: Option<(usize, f64)> = None;
    // Cycles come in (n, j, p, q) order, so compare per track to break ties by lowest j.
    let mut per_track: Vec<Option<f64>> = vec![None; sims.w.num_tracks()];
    for (c, &s) in table.cycles.iter().zip(&table.scores) {
        let slot = &mut per_track[c.j];
        if slot.is_none_or(|b| s > b) {
            *slot = Some(s);
        }
    }
    for (j, s) in per_track.into_iter().enumerate() {
        if let Some(s) = s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
    }
    best.map(|(j, score)| TrackMatch {
        query_track: sims.v.video.tracks[i].track_id,
        reference_track: sims.w.video.tracks[j].track_id,
        score,
    })
}

/// First sequence position at which track `i` has at least one feasible cycle.
pub fn first_anchor_position(sims: &PairSimilarity, i: usize, opts: CycleOptions) -> Option<usize> {
    (0..sims.v.len()).find(|&m| !crate::cycle::cycle_paths(sims.v, sims.w, i, m, opts).is_empty())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameSimilarity {
    pub value: f64,
    /// Set when either frame has no patches.
    pub empty: bool,
}

/// `Σ_i max_j s(V^i_m, W^j_p)` over the patches of two sequence positions.
pub fn frame_similarity(sims: &PairSimilarity, m: usize, p: usize) -> FrameSimilarity {
    let mut total = 0.0;
    let mut any_v = false;
    let mut any_w = false;
    for i in 0..sims.v.num_tracks() {
        let mut best: Option<f64> = None;
        for j in 0..sims.w.num_tracks() {
            if let Some(s) = sims.get((m, i), (p, j)) {
                any_w = true;
                if best.is_none_or(|b| s > b) {
                    best = Some(s);
                }
            }
        }
        if sims.v.has(m, i) {
            any_v = true;
        }
        if let Some(b) = best {
            total += b;
        }
    }
    if !any_v || !any_w {
        return FrameSimilarity { value: 0.0, empty: true };
    }
    FrameSimilarity { value: total, empty: false }
}

/// Reverse-direction counterpart of [`frame_similarity`] (W patches looking into V).
fn frame_similarity_reverse(sims: &PairSimilarity, m: usize, p: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..sims.w.num_tracks() {
        let best = (0..sims.v.num_tracks())
            .filter_map(|i| sims.get((m, i), (p, j)))
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))));
        if let Some(b) = best {
            total += b;
        }
    }
    total
}

/// Frame similarity for every `(query position, reference position)`.
pub fn similarity_grid(sims: &PairSimilarity, symmetric: bool) -> Vec<Vec<f64>> {
    (0..sims.v.len())
        .map(|m| {
            (0..sims.w.len())
                .map(|p| {
                    let forward = frame_similarity(sims, m, p).value;
                    if symmetric {
                        0.5 * (forward + frame_similarity_reverse(sims, m, p))
                    } else {
                        forward
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalAlignment {
    /// `(query position, reference position)`, strictly increasing in both.
    pub pairs: Vec<(usize, usize)>,
    pub similarities: Vec<f64>,
    pub total: f64,
}

/// Strictly monotone `k`-pair matching with maximal summed similarity.
///
/// `best[r][a][b]` is the best total of `r` pairs drawn from the first `a` rows and `b`
/// columns; O(rows · cols · k). Ties prefer skipping rows, then columns, which makes the
/// result deterministic.
pub fn temporal_align_grid(grid: &[Vec<f64>], k: usize) -> Result<TemporalAlignment> {
    let rows = grid.len();
    let cols = grid.first().map_or(0, |r| r.len());
    if grid.iter().any(|r| r.len() != cols) {
        return Err(Error::Config("similarity grid is ragged".into()));
    }
    if k == 0 || k > rows.min(cols) {
        return Err(Error::Config(format!(
            "cannot align {k} frame pairs between sequences of {rows} and {cols} frames"
        )));
    }
    let neg = f64::NEG_INFINITY;
    let idx = |a: usize, b: usize| a * (cols + 1) + b;
    let mut best = vec![vec![neg; (rows + 1) * (cols + 1)]; k + 1];
    best[0].iter_mut().for_each(|v| *v = 0.0);
    for r in 1..=k {
        for a in 1..=rows {
            for b in 1..=cols {
                let take = best[r - 1][idx(a - 1, b - 1)] + grid[a - 1][b - 1];
                let skip_row = best[r][idx(a - 1, b)];
                let skip_col = best[r][idx(a, b - 1)];
                best[r][idx(a, b)] = take.max(skip_row).max(skip_col);
            }
        }
    }
    let total = best[k][idx(rows, cols)];
    if !total.is_finite() {
        return Err(Error::Numerical("non-finite temporal alignment score".into()));
    }

    let mut pairs = Vec::with_capacity(k);
    let (mut a, mut b, mut r) = (rows, cols, k);
    while r > 0 {
        let here = best[r][idx(a, b)];
        if a > 0 && best[r][idx(a - 1, b)] == here {
            a -= 1;
        } else if b > 0 && best[r][idx(a, b - 1)] == here {
            b -= 1;
        } else {
            pairs.push((a - 1, b - 1));
            a -= 1;
            b -= 1;
            r -= 1;
        }
    }
    pairs.reverse();
    let similarities = pairs.iter().map(|&(a, b)| grid[a][b]).collect();
    Ok(TemporalAlignment {
        pairs,
        similarities,
        total,
    })
}

pub fn temporal_align(sims: &PairSimilarity, k: usize, symmetric: bool) -> Result<TemporalAlignment> {
    temporal_align_grid(&similarity_grid(sims, symmetric), k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEntry {
    pub video_id: String,
    pub score: f64,
}

/// Pool videos ranked by `Σ_m max_p T(V_m, W_p)`, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranking: Vec<RetrievalEntry>,
}

impl RetrievalResult {
    pub fn best(&self) -> Option<&RetrievalEntry> {
        self.ranking.first()
    }

    pub fn rank_of(&self, video_id: &str) -> Option<usize> {
        self.ranking.iter().position(|e| e.video_id == video_id)
    }
}

pub fn retrieval_score(query: &EmbeddedSequence, candidate: &EmbeddedSequence) -> f64 {
    let sims = query.pair(candidate);
    (0..sims.v.len())
        .map(|m| {
            (0..sims.w.len())
                .map(|p| frame_similarity(&sims, m, p).value)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .filter(|v| v.is_finite())
        .sum()
}

/// Ranks `pool` against `query`; equal scores keep pool order.
pub fn retrieve(query: &EmbeddedSequence, pool: &[EmbeddedSequence]) -> RetrievalResult {
    let mut ranking: Vec<RetrievalEntry> = pool
        .iter()
        .map(|c| RetrievalEntry {
            video_id: c.view.video.video_id.clone(),
            score: retrieval_score(query, c),
        })
        .collect();
    ranking.sort_by(|a, b| b.score.total_cmp(&a.score));
    RetrievalResult { ranking }
}

/// Convenience form embedding every frame of the query and pool videos.
pub fn retrieve_videos(query: &VideoClip, pool: &[&VideoClip], embedder: &dyn Embed) -> RetrievalResult {
    let q = EmbeddedSequence::full(query, embedder);
    let pool: Vec<EmbeddedSequence> = pool.iter().map(|v| EmbeddedSequence::full(v, embedder)).collect();
    retrieve(&q, &pool)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    /// Frames sampled per video, one per chunk.
    pub num_chunks: usize,
    /// Frame pairs in the temporal alignment.
    pub k: usize,
    pub min_segment_len: usize,
    pub seed: u64,
    /// Average both directions of the frame similarity.
    pub symmetric: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            num_chunks: 8,
            k: 4,
            min_segment_len: 4,
            seed: 0,
            symmetric: false,
        }
    }
}

impl AlignConfig {
    pub fn cycle_options(&self) -> CycleOptions {
        CycleOptions {
            min_segment_len: self.min_segment_len,
            temporal_search: true,
        }
    }
}

/// Frame sequence used for `video` at inference: depends only on the seed and video id,
/// so a clip is sampled identically in every pair it takes part in.
pub fn inference_frames(video: &VideoClip, cfg: &AlignConfig) -> Result<Vec<u32>> {
    let mut h = Sha256::new();
    h.update(cfg.seed.to_le_bytes());
    h.update(video.video_id.as_bytes());
    let digest = h.finalize();
    let stream = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
    let mut rng = run_rng(cfg.seed, stream);
    sample_frame_sequence(video, cfg.num_chunks, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePairRecord {
    pub query_frame: u32,
    pub reference_frame: u32,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackMatchRecord {
    pub query_track: u32,
    pub reference_track: Option<u32>,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMatchRecord {
    pub query_frame: u32,
    pub query_track: u32,
    pub reference_frame: u32,
    pub reference_track: u32,
    pub score: f64,
}

/// Everything inferred about one query/reference pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub query_id: String,
    pub reference_id: String,
    pub query_frames: Vec<u32>,
    pub reference_frames: Vec<u32>,
    pub frame_pairs: Vec<FramePairRecord>,
    pub alignment_score: f64,
    pub track_matches: Vec<TrackMatchRecord>,
    /// Best reference patch for every query patch in each aligned frame pair.
    pub patch_matches: Vec<PatchMatchRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<Vec<RetrievalEntry>>,
}

/// Aligns `reference` to `query`: sampled sequences, per-track matches, `k` temporally
/// consistent frame pairs and patch matches inside them.
pub fn align_pair(query: &VideoClip, reference: &VideoClip, embedder: &dyn Embed, cfg: &AlignConfig) -> Result<AlignmentReport> {
    let v = EmbeddedSequence::new(SequenceView::new(query, inference_frames(query, cfg)?), embedder);
    let w = EmbeddedSequence::new(SequenceView::new(reference, inference_frames(reference, cfg)?), embedder);
    align_sequences(&v, &w, cfg)
}

pub fn align_sequences(v: &EmbeddedSequence, w: &EmbeddedSequence, cfg: &AlignConfig) -> Result<AlignmentReport> {
    let sims = v.pair(w);
    let opts = cfg.cycle_options();

    let track_matches = (0..sims.v.num_tracks())
        .map(|i| {
            let m = first_anchor_position(&sims, i, opts);
            let hit = m.and_then(|m| correspond_track(&sims, i, m, opts));
            TrackMatchRecord {
                query_track: sims.v.video.tracks[i].track_id,
                reference_track: hit.map(|h| h.reference_track),
                score: hit.map(|h| h.score),
            }
        })
        .collect();

    let alignment = temporal_align(&sims, cfg.k, cfg.symmetric)?;
    let frame_pairs = alignment
        .pairs
        .iter()
        .zip(&alignment.similarities)
        .map(|(&(m, p), &s)| FramePairRecord {
            query_frame: sims.v.frames[m],
            reference_frame: sims.w.frames[p],
            similarity: s,
        })
        .collect();

    let mut patch_matches = Vec::new();
    for &(m, p) in &alignment.pairs {
        for i in 0..sims.v.num_tracks() {
            if !sims.v.has(m, i) {
                continue;
            }
            let mut best: Option<(u32, f64)> = None;
            let mut candidates: Vec<usize> = (0..sims.w.num_tracks()).filter(|&j| sims.w.has(p, j)).collect();
            candidates.sort_by_key(|&j| sims.w.video.tracks[j].track_id);
            for j in candidates {
                let s = sims.get((m, i), (p, j)).expect("present");
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((sims.w.video.tracks[j].track_id, s));
                }
            }
            if let Some((track, score)) = best {
                patch_matches.push(PatchMatchRecord {
                    query_frame: sims.v.frames[m],
                    query_track: sims.v.video.tracks[i].track_id,
                    reference_frame: sims.w.frames[p],
                    reference_track: track,
                    score,
                });
            }
        }
    }

    Ok(AlignmentReport {
        query_id: sims.v.video.video_id.clone(),
        reference_id: sims.w.video.video_id.clone(),
        query_frames: sims.v.frames.clone(),
        reference_frames: sims.w.frames.clone(),
        frame_pairs,
        alignment_score: alignment.total,
        track_matches,
        patch_matches,
        retrieval: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::RawFeatures;
    use crate::model::{BoundingBox, Track};

    fn clip(id: &str, frames: u32, feat: impl Fn(usize, u32) -> Vec<f32>, tracks: usize) -> VideoClip {
        VideoClip {
            video_id: id.into(),
            class_label: "c".into(),
            num_frames: frames,
            tracks: (0..tracks)
                .map(|t| Track {
                    track_id: 10 + t as u32,
                    patches: (0..frames)
                        .map(|f| PatchRef {
                            track_id: 10 + t as u32,
                            frame_id: f,
                            bbox: BoundingBox { x: 30.0 * t as f32, y: 0.0, w: 8.0, h: 8.0 },
                            feature: feat(t, f),
                            part_label: Some(t as u32),
                        })
                        .collect(),
                })
                .collect(),
            latent_state: None,
            keypoints: None,
        }
    }

    fn onehot(t: usize, f: u32) -> Vec<f32> {
        let mut v = vec![0.01; 12];
        v[t] = 1.0;
        v[4 + (f as usize % 8)] += 0.5;
        v
    }

    #[test]
    fn patch_self_match_and_singleton() {
        let v = clip("v", 6, onehot, 3);
        let q = &v.tracks[1].patches[2];
        let hit = correspond_patch(q, &v, &RawFeatures).unwrap();
        assert_eq!((hit.frame_id, hit.track_id), (2, 11));
        assert!((hit.score - 1.0).abs() < 1e-12);

        let single = clip("s", 1, |_, _| vec![-1.0, 0.0, 0.0], 1);
        let hit = correspond_patch(q, &single, &RawFeatures).unwrap();
        assert_eq!((hit.frame_id, hit.track_id), (0, 10));
    }

    #[test]
    fn copy_matches_itself_with_score_two() {
        let v = clip("v", 8, onehot, 3);
        let a = EmbeddedSequence::full(&v, &RawFeatures);
        let b = EmbeddedSequence::full(&v, &RawFeatures);
        let sims = a.pair(&b);
        for i in 0..3 {
            let hit = correspond_track(&sims, i, 0, CycleOptions::default()).unwrap();
            assert_eq!(hit.reference_track, v.tracks[i].track_id);
            assert!((hit.score - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_track_reference_always_wins() {
        let v = clip("v", 8, onehot, 3);
        let w = clip("w", 8, |_, f| onehot(3, f), 1);
        let (a, b) = (EmbeddedSequence::full(&v, &RawFeatures), EmbeddedSequence::full(&w, &RawFeatures));
        let hit = correspond_track(&a.pair(&b), 0, 0, CycleOptions::default()).unwrap();
        assert_eq!(hit.reference_track, 10);
    }

    #[test]
    fn frame_similarity_identities() {
        let v = clip("v", 4, onehot, 3);
        let a = EmbeddedSequence::full(&v, &RawFeatures);
        let sims = a.pair(&a);
        let fs = frame_similarity(&sims, 2, 2);
        assert!((fs.value - 3.0).abs() < 1e-12 && !fs.empty);

        let one = clip("o", 2, |_, f| vec![1.0, f as f32], 1);
        let e = EmbeddedSequence::full(&one, &RawFeatures);
        let s = e.pair(&e);
        assert!((frame_similarity(&s, 0, 1).value - cosine_sim(&[1.0, 0.0], &[1.0, 1.0])).abs() < 1e-15);
    }

    #[test]
    fn empty_frame_flagged() {
        let mut v = clip("v", 3, onehot, 1);
        v.tracks[0].patches.remove(1);
        let a = EmbeddedSequence::full(&v, &RawFeatures);
        let fs = frame_similarity(&a.pair(&a), 1, 0);
        assert_eq!(fs, FrameSimilarity { value: 0.0, empty: true });
    }

    #[test]
    fn identity_alignment_on_copies() {
        let v = clip("v", 8, onehot, 2);
        let a = EmbeddedSequence::full(&v, &RawFeatures);
        let al = temporal_align(&a.pair(&a), 8, false).unwrap();
        assert_eq!(al.pairs, (0..8).map(|r| (r, r)).collect::<Vec<_>>());
    }

    #[test]
    fn single_pair_is_grid_argmax() {
        let grid = vec![vec![0.1, 0.9, 0.3], vec![0.95, 0.2, 0.4]];
        let al = temporal_align_grid(&grid, 1).unwrap();
        assert_eq!(al.pairs, vec![(1, 0)]);
        assert_eq!(al.total, 0.95);
    }

    #[test]
    fn infeasible_k_rejected() {
        let grid = vec![vec![0.0; 3]; 2];
        assert!(temporal_align_grid(&grid, 3).is_err());
        assert!(temporal_align_grid(&grid, 0).is_err());
    }

    #[test]
    fn self_retrieval_ranks_first() {
        let v = clip("v", 6, onehot, 3);
        let w = clip("w", 6, |t, f| onehot((t + 1) % 4, f + 3), 3);
        let r = retrieve_videos(&v, &[&w, &v], &RawFeatures);
        assert_eq!(r.best().unwrap().video_id, "v");
        let r = retrieve_videos(&v, &[&w], &RawFeatures);
        assert_eq!(r.ranking.len(), 1);
    }

    #[test]
    fn inference_frames_depend_on_id_and_seed_only() {
        let v = clip("v", 24, onehot, 1);
        let cfg = AlignConfig::default();
        assert_eq!(inference_frames(&v, &cfg).unwrap(), inference_frames(&v, &cfg).unwrap());
        assert_eq!(inference_frames(&v, &cfg).unwrap().len(), 8);
    }

    #[test]
    fn report_round_trips_as_json() {
        let v = clip("v", 12, onehot, 3);
        let w = clip("w", 12, |t, f| onehot(t, f + 1), 3);
        let report = align_pair(&v, &w, &RawFeatures, &AlignConfig::default()).unwrap();
        assert_eq!(report.frame_pairs.len(), 4);
        assert_eq!(report.track_matches.len(), 3);
        assert_eq!(report.patch_matches.len(), 12);
        let text = serde_json::to_string(&report).unwrap();
        let back: AlignmentReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }
}
