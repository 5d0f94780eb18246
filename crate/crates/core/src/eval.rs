//! Alignment quality metrics against synthetic ground truth or keypoint sidecars.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_sequences, inference_frames, AlignConfig, AlignmentReport, EmbeddedSequence, retrieval_score};
use crate::cycle::SequenceView;
use crate::embed::Embed;
use crate::error::{Error, Result};
use crate::model::{BoundingBox, Dataset, FrameKeypoints, VideoClip};

/// A joint angle: the angle at `center` between the limbs towards `a` and `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    pub a: String,
    pub center: String,
    pub b: String,
}

impl JointSpec {
    fn new(name: &str, a: &str, center: &str, b: &str) -> Self {
        JointSpec {
            name: name.into(),
            a: a.into(),
            center: center.into(),
            b: b.into(),
        }
    }
}

/// Knees, elbows, hips and neck. `mid_shoulder` and `mid_hip` are derived points.
pub fn default_joints() -> Vec<JointSpec> {
    vec![
        JointSpec::new("left_knee", "left_hip", "left_knee", "left_ankle"),
        JointSpec::new("right_knee", "right_hip", "right_knee", "right_ankle"),
        JointSpec::new("left_elbow", "left_shoulder", "left_elbow", "left_wrist"),
        JointSpec::new("right_elbow", "right_shoulder", "right_elbow", "right_wrist"),
        JointSpec::new("left_hip", "left_shoulder", "left_hip", "left_knee"),
        JointSpec::new("right_hip", "right_shoulder", "right_hip", "right_knee"),
        JointSpec::new("neck", "head", "mid_shoulder", "mid_hip"),
    ]
}

fn keypoint(kps: &FrameKeypoints, name: &str) -> Option<[f64; 2]> {
    let get = |n: &str| kps.get(n).map(|p| [p[0] as f64, p[1] as f64]);
    let mid = |l: &str, r: &str| {
        let (l, r) = (get(l)?, get(r)?);
        Some([(l[0] + r[0]) / 2.0, (l[1] + r[1]) / 2.0])
    };
    match name {
        "mid_shoulder" => get(name).or_else(|| mid("left_shoulder", "right_shoulder")),
        "mid_hip" => get(name).or_else(|| mid("left_hip", "right_hip")),
        _ => get(name),
    }
}

/// Angle in radians, in `[0, π]`; `None` when a point is missing or a limb has zero length.
pub fn joint_angle(kps: &FrameKeypoints, joint: &JointSpec) -> Option<f64> {
    let c = keypoint(kps, &joint.center)?;
    let a = keypoint(kps, &joint.a)?;
    let b = keypoint(kps, &joint.b)?;
    let u = [a[0] - c[0], a[1] - c[1]];
    let v = [b[0] - c[0], b[1] - c[1]];
    if (u[0] == 0.0 && u[1] == 0.0) || (v[0] == 0.0 && v[1] == 0.0) {
        return None;
    }
    let cross = u[0] * v[1] - u[1] * v[0];
    let dot = u[0] * v[0] + u[1] * v[1];
    Some(cross.abs().atan2(dot))
}

/// Mean over joints present in both frames; `None` if none are.
pub fn pose_difference(x: &FrameKeypoints, y: &FrameKeypoints, joints: &[JointSpec]) -> Option<f64> {
    let diffs: Vec<f64> = joints
        .iter()
        .filter_map(|j| Some((joint_angle(x, j)? - joint_angle(y, j)?).abs()))
        .collect();
    (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundTruthMode {
    Synthetic,
    Keypoint,
}

/// Mean error over aligned `(query frame, reference frame)` pairs. Synthetic mode uses
/// `|θ_V − θ_W|`; keypoint mode averages joint-angle differences per pair first.
pub fn temporal_alignment_error(
    pairs: &[(u32, u32)],
    v: &VideoClip,
    w: &VideoClip,
    joints: &[JointSpec],
) -> Result<(f64, GroundTruthMode)> {
    if pairs.is_empty() {
        return Err(Error::Config("no aligned frame pairs to evaluate".into()));
    }
    if let (Some(tv), Some(tw)) = (&v.latent_state, &w.latent_state) {
        let total: f64 = pairs
            .iter()
            .map(|&(a, b)| (tv[a as usize] - tw[b as usize]).abs())
            .sum();
        return Ok((total / pairs.len() as f64, GroundTruthMode::Synthetic));
    }
    if let (Some(kv), Some(kw)) = (&v.keypoints, &w.keypoints) {
        let per_pair: Vec<f64> = pairs
            .iter()
            .filter_map(|&(a, b)| pose_difference(&kv[a as usize], &kw[b as usize], joints))
            .collect();
        if per_pair.is_empty() {
            return Err(Error::MissingGroundTruth(format!(
                "no joint visible in both {} and {} on the aligned frames",
                v.video_id, w.video_id
            )));
        }
        return Ok((per_pair.iter().sum::<f64>() / per_pair.len() as f64, GroundTruthMode::Keypoint));
    }
    Err(Error::MissingGroundTruth(format!(
        "pair {} / {} has neither latent states nor keypoints",
        v.video_id, w.video_id
    )))
}

fn track_label(video: &VideoClip, track_id: u32) -> Result<u32> {
    video
        .track_index(track_id)
        .and_then(|ix| video.tracks[ix].part_label())
        .ok_or_else(|| Error::MissingGroundTruth(format!("{}: track {track_id} has no part label", video.video_id)))
}

/// `(correct, total)`: query tracks whose match carries the same part label. Unmatched
/// tracks count as wrong.
pub fn track_correspondence_accuracy(report: &AlignmentReport, v: &VideoClip, w: &VideoClip) -> Result<(usize, usize)> {
    let mut correct = 0;
    for m in &report.track_matches {
        let want = track_label(v, m.query_track)?;
        if let Some(r) = m.reference_track {
            if track_label(w, r)? == want {
                correct += 1;
            }
        }
    }
    Ok((correct, report.track_matches.len()))
}

fn boxes_share_keypoint(a: &BoundingBox, ka: &FrameKeypoints, b: &BoundingBox, kb: &FrameKeypoints) -> bool {
    ka.iter()
        .any(|(name, p)| a.contains(p[0], p[1]) && kb.get(name).is_some_and(|q| b.contains(q[0], q[1])))
}

/// `(correct, total)` over the report's patch matches: same part label, or, without
/// labels, both boxes containing the same named keypoint.
pub fn spatial_alignment_accuracy(report: &AlignmentReport, v: &VideoClip, w: &VideoClip) -> Result<(usize, usize)> {
    let mut correct = 0;
    for m in &report.patch_matches {
        let vp = v.track_index(m.query_track).and_then(|ix| v.tracks[ix].patch_at(m.query_frame));
        let wp = w.track_index(m.reference_track).and_then(|ix| w.tracks[ix].patch_at(m.reference_frame));
        let (Some(vp), Some(wp)) = (vp, wp) else {
            return Err(Error::validation(&report.query_id, "patch match refers to a missing patch"));
        };
        let hit = match (vp.part_label, wp.part_label) {
            (Some(a), Some(b)) => a == b,
            _ => match (&v.keypoints, &w.keypoints) {
                (Some(kv), Some(kw)) => boxes_share_keypoint(
                    &vp.bbox,
                    &kv[m.query_frame as usize],
                    &wp.bbox,
                    &kw[m.reference_frame as usize],
                ),
                _ => {
                    return Err(Error::MissingGroundTruth(format!(
                        "pair {} / {} has neither part labels nor keypoints",
                        v.video_id, w.video_id
                    )))
                }
            },
        };
        correct += hit as usize;
    }
    Ok((correct, report.patch_matches.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub query_id: String,
    pub reference_id: String,
    pub temporal_error: f64,
    pub tracks_correct: usize,
    pub tracks_total: usize,
    pub patches_correct: usize,
    pub patches_total: usize,
}

impl PairEval {
    pub fn track_accuracy(&self) -> f64 {
        ratio(self.tracks_correct, self.tracks_total)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Scores one alignment report. `align` and `eval` both go through here.
pub fn evaluate_report(report: &AlignmentReport, v: &VideoClip, w: &VideoClip, joints: &[JointSpec]) -> Result<(PairEval, GroundTruthMode)> {
    let pairs: Vec<(u32, u32)> = report
        .frame_pairs
        .iter()
        .map(|p| (p.query_frame, p.reference_frame))
        .collect();
    let (temporal_error, mode) = temporal_alignment_error(&pairs, v, w, joints)?;
    let (tracks_correct, tracks_total) = track_correspondence_accuracy(report, v, w)?;
    let (patches_correct, patches_total) = spatial_alignment_accuracy(report, v, w)?;
    Ok((
        PairEval {
            query_id: report.query_id.clone(),
            reference_id: report.reference_id.clone(),
            temporal_error,
            tracks_correct,
            tracks_total,
            patches_correct,
            patches_total,
        },
        mode,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub temporal_alignment_error: f64,
    pub spatial_alignment_accuracy: f64,
    pub track_correspondence_accuracy: f64,
    pub num_pairs: usize,
    pub mode: GroundTruthMode,
    pub config: AlignConfig,
    pub pairs: Vec<PairEval>,
}

impl EvalReport {
    /// Aggregates per-pair results: temporal error is the mean over pairs, accuracies
    /// pool all tracks and patches.
    pub fn from_pairs(pairs: Vec<PairEval>, mode: GroundTruthMode, config: AlignConfig) -> Self {
        let n = pairs.len();
        let err = pairs.iter().map(|p| p.temporal_error).sum::<f64>() / n.max(1) as f64;
        let sum = |f: fn(&PairEval) -> usize| pairs.iter().map(f).sum::<usize>();
        EvalReport {
            temporal_alignment_error: err,
            spatial_alignment_accuracy: ratio(sum(|p| p.patches_correct), sum(|p| p.patches_total)),
            track_correspondence_accuracy: ratio(sum(|p| p.tracks_correct), sum(|p| p.tracks_total)),
            num_pairs: n,
            mode,
            config,
            pairs,
        }
    }

    /// Header and one data row.
    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let c = &self.config;
        let mode = match self.mode {
            GroundTruthMode::Synthetic => "synthetic",
            GroundTruthMode::Keypoint => "keypoint",
        };
        let rows: [[String; 10]; 2] = [
            [
                "temporal_alignment_error",
                "spatial_alignment_accuracy",
                "track_correspondence_accuracy",
                "num_pairs",
                "mode",
                "num_chunks",
                "k",
                "min_segment_len",
                "seed",
                "symmetric",
            ]
            .map(String::from),
            [
                self.temporal_alignment_error.to_string(),
                self.spatial_alignment_accuracy.to_string(),
                self.track_correspondence_accuracy.to_string(),
                self.num_pairs.to_string(),
                mode.to_string(),
                c.num_chunks.to_string(),
                c.k.to_string(),
                c.min_segment_len.to_string(),
                c.seed.to_string(),
                c.symmetric.to_string(),
            ],
        ];
        for row in rows {
            wtr.write_record(&row).map_err(|e| Error::Config(format!("csv: {e}")))?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Ordered `(query, reference)` index pairs of distinct same-class videos, optionally
/// restricted to pairs touching at least one video in `involving`.
pub fn same_class_pairs(dataset: &Dataset, involving: Option<&[String]>) -> Vec<(usize, usize)> {
    let touches = |ix: usize| involving.is_none_or(|ids| ids.contains(&dataset.videos[ix].video_id));
    let mut out = Vec::new();
    for members in dataset.class_index.values() {
        for &a in members {
            for &b in members {
                if a != b && (touches(a) || touches(b)) {
                    out.push((a, b));
                }
            }
        }
    }
    out
}

/// Splits off the last `held_out_per_class` videos of every class. Returns the training
/// dataset and the held-out video ids.
pub fn split_held_out(dataset: &Dataset, held_out_per_class: usize) -> Result<(Dataset, Vec<String>)> {
    let mut held = Vec::new();
    for members in dataset.class_index.values() {
        let cut = members.len().saturating_sub(held_out_per_class);
        held.extend(members[cut..].iter().map(|&ix| dataset.videos[ix].video_id.clone()));
    }
    let train = dataset.filter(|v| !held.contains(&v.video_id))?;
    Ok((train, held))
}

fn embed_all<'a>(dataset: &'a Dataset, embedder: &dyn Embed, cfg: &AlignConfig, needed: &[usize]) -> Result<BTreeMap<usize, EmbeddedSequence<'a>>> {
    let mut ids: Vec<usize> = needed.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let seqs: Vec<Result<(usize, EmbeddedSequence)>> = ids
        .par_iter()
        .map(|&ix| {
            let video = &dataset.videos[ix];
            let frames = inference_frames(video, cfg)?;
            Ok((ix, EmbeddedSequence::new(SequenceView::new(video, frames), embedder)))
        })
        .collect();
    seqs.into_iter().collect()
}

/// Aligns and scores every pair. Equal to running `align_pair` + `evaluate_report` pair
/// by pair, since each clip's frame sequence depends only on its id and the seed.
pub fn evaluate(dataset: &Dataset, embedder: &dyn Embed, pairs: &[(usize, usize)], cfg: &AlignConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Config("no video pairs to evaluate".into()));
    }
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a.max(b) >= dataset.videos.len()) {
        return Err(Error::Config(format!(
            "pair ({a}, {b}) is out of range for {} videos",
            dataset.videos.len()
        )));
    }
    let needed: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let seqs = embed_all(dataset, embedder, cfg, &needed)?;
    let joints = default_joints();
    let results: Vec<Result<(PairEval, GroundTruthMode)>> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let report = align_sequences(&seqs[&a], &seqs[&b], cfg)?;
            evaluate_report(&report, &dataset.videos[a], &dataset.videos[b], &joints)
        })
        .collect();
    let mut evals = Vec::with_capacity(results.len());
    let mut mode = None;
    for r in results {
        let (e, m) = r?;
        if mode.is_some_and(|prev| prev != m) {
            return Err(Error::Config("pairs mix synthetic and keypoint ground truth".into()));
        }
        mode = Some(m);
        evals.push(e);
    }
    Ok(EvalReport::from_pairs(evals, mode.expect("at least one pair"), cfg.clone()))
}

/// Track accuracy when every query is aligned to its best retrieved same-class video,
/// next to the mean over all same-class references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalAblation {
    pub best_retrieved_accuracy: f64,
    pub all_pairs_accuracy: f64,
    pub num_queries: usize,
}

pub fn retrieval_ablation(dataset: &Dataset, embedder: &dyn Embed, queries: &[usize], cfg: &AlignConfig) -> Result<RetrievalAblation> {
    let mut pairs = Vec::new();
    let mut best_pairs = Vec::new();
    let all: Vec<usize> = (0..dataset.videos.len()).collect();
    let seqs = embed_all(dataset, embedder, cfg, &all)?;
    for &q in queries {
        let class = &dataset.videos[q].class_label;
        let pool: Vec<usize> = dataset.class_index[class].iter().copied().filter(|&r| r != q).collect();
        if pool.is_empty() {
            continue;
        }
        let mut best = (pool[0], f64::NEG_INFINITY);
        for &r in &pool {
            let s = retrieval_score(&seqs[&q], &seqs[&r]);
            if s > best.1 {
                best = (r, s);
            }
            pairs.push((q, r));
        }
        best_pairs.push((q, best.0));
    }
    if best_pairs.is_empty() {
        return Err(Error::Config("no query has a same-class reference".into()));
    }
    let all_pairs = evaluate(dataset, embedder, &pairs, cfg)?;
    let best = evaluate(dataset, embedder, &best_pairs, cfg)?;
    Ok(RetrievalAblation {
        best_retrieved_accuracy: best.track_correspondence_accuracy,
        all_pairs_accuracy: all_pairs.track_correspondence_accuracy,
        num_queries: best_pairs.len(),
    })
}

/// Monte-Carlo estimate of `E|U − U'|` for independent uniforms: the error of a random
/// alignment on uniformly distributed states (exactly 1/3 in the limit).
pub fn random_alignment_baseline(samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..samples)
        .map(|_| (rng.random::<f64>() - rng.random::<f64>()).abs())
        .sum();
    total / samples.max(1) as f64
}
