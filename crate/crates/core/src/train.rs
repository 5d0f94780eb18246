//! Margin-loss training of the embedding head over best cycles between same-class
//! video pairs.
//!
//! For an anchor patch `V^i_m` the loss compares the soft best-cycle score back to the
//! anchor (and a jittered copy of it) against the score back to every other patch in
//! frame `m` that does not overlap the anchor, and asks the former to win by `margin`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cycle::{cycle_paths, hard_max, soft_max_grad, CycleOptions, CyclePath, SequenceView};
use crate::embed::{
    cosine_backward, cosine_sim, finite_diff_check, load_checkpoint, save_checkpoint, EmbedParams, ForwardCache,
    GradBuffer, GradCheckReport, HeadDims,
};
use crate::error::{Error, Result};
use crate::model::{iou, sample_frame_sequence, BoundingBox, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub iterations: usize,
    pub batch_pairs: usize,
    pub num_chunks: usize,
    pub min_segment_len: usize,
    pub iou_pos_threshold: f64,
    pub seed: u64,
    /// Use the exact maximum instead of Γ for the negative best-cycle scores.
    pub hard_negative_kappa: bool,
    /// Search over jump frames; when off, sampled frames of both videos are assumed aligned.
    pub temporal_search: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Checkpoint interval in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            margin: 0.5,
            iterations: 2000,
            batch_pairs: 8,
            num_chunks: 8,
            min_segment_len: 4,
            iou_pos_threshold: 0.5,
            seed: 0,
            hard_negative_kappa: false,
            temporal_search: true,
            hidden_dim: 256,
            embed_dim: 256,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad("margin must be positive");
        }
        if !(self.iou_pos_threshold > 0.0 && self.iou_pos_threshold <= 1.0) {
            return bad("iou_pos_threshold must lie in (0, 1]");
        }
        if self.batch_pairs == 0 || self.num_chunks == 0 {
            return bad("batch_pairs and num_chunks must be at least 1");
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("hidden_dim and embed_dim must be at least 1");
        }
        Ok(())
    }

    pub fn cycle_options(&self) -> CycleOptions {
        CycleOptions {
            min_segment_len: self.min_segment_len,
            temporal_search: self.temporal_search,
        }
    }

    pub fn head_dims(&self, feature_dim: usize) -> HeadDims {
        HeadDims {
            input: feature_dim,
            hidden: self.hidden_dim,
            output: self.embed_dim,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A loss endpoint `V^k_m`: an actual patch of V or a jittered copy of the anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct Endpoint {
    pub bbox: BoundingBox,
    pub feature: Vec<f32>,
    /// Track index in V, `None` for the jittered copy.
    pub track: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// Index of V in the dataset.
    pub v: usize,
    /// Index of W in the dataset.
    pub w: usize,
    pub v_frames: Vec<u32>,
    pub w_frames: Vec<u32>,
    pub anchor_track: usize,
    /// Position of the anchor frame within `v_frames`.
    pub anchor_pos: usize,
    pub positives: Vec<Endpoint>,
    pub negatives: Vec<Endpoint>,
}

impl TrainingSample {
    pub fn anchor_box<'d>(&self, dataset: &'d Dataset) -> &'d BoundingBox {
        let video = &dataset.videos[self.v];
        &video.tracks[self.anchor_track]
            .patch_at(self.v_frames[self.anchor_pos])
            .expect("anchor patch exists")
            .bbox
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<TrainingSample>,
    /// Pairs for which no valid anchor was found.
    pub skipped: usize,
}

const SAMPLE_ATTEMPTS: usize = 16;
const JITTER: f32 = 0.1;
/// Relative noise added to the jittered positive's feature, standing in for re-pooling
/// the shifted box.
const JITTER_FEATURE_NOISE: f64 = 0.02;

/// Returns the anchors `(track, position)` that have a feasible cycle and at least one
/// non-overlapping patch in the same frame.
fn valid_anchors(v: &SequenceView, w: &SequenceView, cfg: &TrainConfig) -> Vec<(usize, usize)> {
    let opts = cfg.cycle_options();
    let mut out = Vec::new();
    for m in 0..v.len() {
        for i in 0..v.num_tracks() {
            let Some(anchor) = v.patch(m, i) else { continue };
            let has_negative = (0..v.num_tracks()).any(|k| {
                k != i && v.patch(m, k).is_some_and(|p| iou(&anchor.bbox, &p.bbox) < cfg.iou_pos_threshold)
            });
            if has_negative && !cycle_paths(v, w, i, m, opts).is_empty() {
                out.push((i, m));
            }
        }
    }
    out
}

fn jitter_box<R: Rng + ?Sized>(b: &BoundingBox, threshold: f64, rng: &mut R) -> BoundingBox {
    let mut amount = JITTER;
    loop {
        for _ in 0..32 {
            let mut r = || rng.random_range(-amount..=amount);
            let cand = BoundingBox {
                x: b.x + r() * b.w,
                y: b.y + r() * b.h,
                w: b.w * (1.0 + r()),
                h: b.h * (1.0 + r()),
            };
            if cand.is_valid() && iou(b, &cand) >= threshold {
                return cand;
            }
        }
        amount *= 0.5;
        if amount < 1e-4 {
            return *b;
        }
    }
}

fn jitter_feature<R: Rng + ?Sized>(f: &[f32], rng: &mut R) -> Vec<f32> {
    let rms = (f.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / f.len().max(1) as f64).sqrt();
    let sd = JITTER_FEATURE_NOISE * rms;
    if sd <= 0.0 {
        return f.to_vec();
    }
    let noise = Normal::new(0.0, sd).expect("finite stddev");
    f.iter().map(|&v| (v as f64 + noise.sample(rng)) as f32).collect()
}

/// Draws `batch_pairs` training samples: a class uniformly among those with at least two
/// videos, an ordered pair of distinct videos uniformly within it, one frame per chunk in
/// each, then an anchor uniformly among the valid ones.
pub fn sample_training_batch<R: Rng + ?Sized>(dataset: &Dataset, cfg: &TrainConfig, rng: &mut R) -> Result<Batch> {
    let classes: Vec<&Vec<usize>> = dataset.class_index.values().filter(|v| v.len() >= 2).collect();
    if classes.is_empty() {
        return Err(Error::Config(
            "no class has two or more videos; cannot form training pairs".into(),
        ));
    }
    let mut batch = Batch {
        samples: Vec::with_capacity(cfg.batch_pairs),
        skipped: 0,
    };
    for _ in 0..cfg.batch_pairs {
        match draw_sample(dataset, cfg, &classes, rng)? {
            Some(s) => batch.samples.push(s),
            None => batch.skipped += 1,
        }
    }
    Ok(batch)
}

fn draw_sample<R: Rng + ?Sized>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    classes: &[&Vec<usize>],
    rng: &mut R,
) -> Result<Option<TrainingSample>> {
    for _ in 0..SAMPLE_ATTEMPTS {
        let members = *classes.choose(rng).expect("non-empty");
        let a = rng.random_range(0..members.len());
        let mut b = rng.random_range(0..members.len() - 1);
        if b >= a {
            b += 1;
        }
        let (vi, wi) = (members[a], members[b]);
        let (v, w) = (&dataset.videos[vi], &dataset.videos[wi]);
        let v_frames = sample_frame_sequence(v, cfg.num_chunks, rng)?;
        let w_frames = sample_frame_sequence(w, cfg.num_chunks, rng)?;
        let vv = SequenceView::new(v, v_frames.clone());
        let wv = SequenceView::new(w, w_frames.clone());
        let anchors = valid_anchors(&vv, &wv, cfg);
        let Some(&(i, m)) = anchors.choose(rng) else { continue };

        let anchor = vv.patch(m, i).expect("valid anchor");
        let jittered = Endpoint {
            bbox: jitter_box(&anchor.bbox, cfg.iou_pos_threshold, rng),
            feature: jitter_feature(&anchor.feature, rng),
            track: None,
        };
        let positives = vec![
            Endpoint {
                bbox: anchor.bbox,
                feature: anchor.feature.clone(),
                track: Some(i),
            },
            jittered,
        ];
        let negatives = (0..vv.num_tracks())
            .filter(|&k| k != i)
            .filter_map(|k| vv.patch(m, k).map(|p| (k, p)))
            .filter(|(_, p)| iou(&anchor.bbox, &p.bbox) < cfg.iou_pos_threshold)
            .map(|(k, p)| Endpoint {
                bbox: p.bbox,
                feature: p.feature.clone(),
                track: Some(k),
            })
            .collect();
        return Ok(Some(TrainingSample {
            v: vi,
            w: wi,
            v_frames,
            w_frames,
            anchor_track: i,
            anchor_pos: m,
            positives,
            negatives,
        }));
    }
    Ok(None)
}

/// Loss of one sample, with its gradient when requested.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub loss: f64,
    pub grads: Option<GradBuffer>,
    /// True when no cycle was feasible and the sample contributed nothing.
    pub skipped: bool,
    pub num_cycles: usize,
    pub kappa_pos: Vec<f64>,
    pub kappa_neg: Vec<f64>,
}

struct Node {
    cache: ForwardCache,
    upstream: Vec<f64>,
}

impl Node {
    fn new(params: &EmbedParams, feature: &[f32]) -> Result<Self> {
        let x: Vec<f64> = feature.iter().map(|&v| v as f64).collect();
        let (out, cache) = params.forward(&x)?;
        Ok(Node {
            upstream: vec![0.0; out.len()],
            cache,
        })
    }

    fn emb(&self) -> &[f64] {
        &self.cache.output
    }
}

/// Margin loss of one sample and its gradient with respect to the head parameters.
pub fn margin_loss(dataset: &Dataset, sample: &TrainingSample, params: &EmbedParams, cfg: &TrainConfig) -> Result<SampleLoss> {
    sample_loss(dataset, sample, params, cfg, true)
}

/// Margin loss of one sample without gradients; `None` when the sample is skipped.
pub fn margin_loss_value(dataset: &Dataset, sample: &TrainingSample, params: &EmbedParams, cfg: &TrainConfig) -> Result<Option<f64>> {
    let out = sample_loss(dataset, sample, params, cfg, false)?;
    Ok((!out.skipped).then_some(out.loss))
}

fn sample_loss(
    dataset: &Dataset,
    sample: &TrainingSample,
    params: &EmbedParams,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<SampleLoss> {
    let skipped = || SampleLoss {
        loss: 0.0,
        grads: want_grad.then(|| GradBuffer::zeros_like(params)),
        skipped: true,
        num_cycles: 0,
        kappa_pos: vec![],
        kappa_neg: vec![],
    };
    let v = SequenceView::new(&dataset.videos[sample.v], sample.v_frames.clone());
    let w = SequenceView::new(&dataset.videos[sample.w], sample.w_frames.clone());
    let (i, m) = (sample.anchor_track, sample.anchor_pos);
    let paths: Vec<CyclePath> = cycle_paths(&v, &w, i, m, cfg.cycle_options());
    if paths.is_empty() || sample.positives.is_empty() || sample.negatives.is_empty() {
        return Ok(skipped());
    }

    // Forward passes: anchor track at every later position, every W slot, every endpoint.
    let mut v_nodes: Vec<Option<Node>> = Vec::with_capacity(v.len());
    for n in 0..v.len() {
        v_nodes.push(match v.patch(n, i) {
            Some(p) if n > m => Some(Node::new(params, &p.feature)?),
            _ => None,
        });
    }
    let mut w_nodes = Vec::with_capacity(w.num_slots());
    for s in 0..w.num_slots() {
        w_nodes.push(Node::new(params, &w.slot_patch(s).feature)?);
    }
    let endpoints: Vec<&Endpoint> = sample.positives.iter().chain(&sample.negatives).collect();
    let mut e_nodes = Vec::with_capacity(endpoints.len());
    for e in &endpoints {
        e_nodes.push(Node::new(params, &e.feature)?);
    }
    let n_pos = sample.positives.len();

    // Outgoing jump V^i_n -> W^j_q, shared by every endpoint.
    let ws = w.num_slots();
    let mut out_sim = vec![f64::NAN; v.len() * ws];
    let mut path_slots = Vec::with_capacity(paths.len());
    for c in &paths {
        let q_slot = w.slot(c.q, c.j).expect("feasible path");
        let p_slot = w.slot(c.p, c.j).expect("feasible path");
        let cell = c.n * ws + q_slot;
        if out_sim[cell].is_nan() {
            let vn = v_nodes[c.n].as_ref().expect("anchor track present at n");
            out_sim[cell] = cosine_sim(vn.emb(), w_nodes[q_slot].emb());
        }
        path_slots.push((cell, p_slot));
    }

    // Return jump W^j_p -> endpoint, then best-cycle scores per endpoint.
    let mut kappas = Vec::with_capacity(endpoints.len());
    let mut kappa_grads: Vec<Vec<f64>> = Vec::with_capacity(endpoints.len());
    let mut back_sims: Vec<Vec<f64>> = Vec::with_capacity(endpoints.len());
    for (e_ix, node) in e_nodes.iter().enumerate() {
        let back: Vec<f64> = w_nodes.iter().map(|wn| cosine_sim(wn.emb(), node.emb())).collect();
        let scores: Vec<f64> = path_slots.iter().map(|&(cell, p)| out_sim[cell] + back[p]).collect();
        let hard = cfg.hard_negative_kappa && e_ix >= n_pos;
        let (k, dk) = if hard {
            let (ix, best) = hard_max(&scores).expect("non-empty");
            let mut g = vec![0.0; scores.len()];
            g[ix] = 1.0;
            (best, g)
        } else {
            soft_max_grad(&scores)?
        };
        kappas.push(k);
        kappa_grads.push(dk);
        back_sims.push(back);
    }

    let pairs = (n_pos * sample.negatives.len()) as f64;
    let mut loss = 0.0;
    let mut d_kappa = vec![0.0; endpoints.len()];
    for a in 0..n_pos {
        for b in n_pos..endpoints.len() {
            let hinge = cfg.margin - kappas[a] + kappas[b];
            if hinge > 0.0 {
                loss += hinge;
                d_kappa[a] -= 1.0 / pairs;
                d_kappa[b] += 1.0 / pairs;
            }
        }
    }
    loss /= pairs;

    let mut out = SampleLoss {
        loss,
        grads: None,
        skipped: false,
        num_cycles: paths.len(),
        kappa_pos: kappas[..n_pos].to_vec(),
        kappa_neg: kappas[n_pos..].to_vec(),
    };
    if !want_grad {
        return Ok(out);
    }

    // Chain rule back to the cosine similarities.
    let mut d_out = vec![0.0; out_sim.len()];
    let mut d_back = vec![vec![0.0; ws]; endpoints.len()];
    for (e_ix, &dk) in d_kappa.iter().enumerate() {
        if dk == 0.0 {
            continue;
        }
        for (&(cell, p), &g) in path_slots.iter().zip(&kappa_grads[e_ix]) {
            let g = dk * g;
            d_out[cell] += g;
            d_back[e_ix][p] += g;
        }
    }

    // Cosine backward into per-node upstream gradients.
    for (cell, &d) in d_out.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let (n, q_slot) = (cell / ws, cell % ws);
        let vn = v_nodes[n].as_mut().expect("anchor track present at n");
        let wn = &mut w_nodes[q_slot];
        let (a, b) = (vn.cache.output.clone(), wn.cache.output.clone());
        cosine_backward(&a, &b, d, &mut vn.upstream, &mut wn.upstream);
    }
    for (e_ix, row) in d_back.iter().enumerate() {
        for (p_slot, &d) in row.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let wn = &mut w_nodes[p_slot];
            let en = &mut e_nodes[e_ix];
            cosine_backward(&wn.cache.output, &en.cache.output, d, &mut wn.upstream, &mut en.upstream);
        }
    }

    let mut grads = GradBuffer::zeros_like(params);
    for node in v_nodes.iter().flatten().chain(&w_nodes).chain(&e_nodes) {
        if node.upstream.iter().any(|&u| u != 0.0) {
            params.backward(&node.cache, &node.upstream, &mut grads)?;
        }
    }
    out.grads = Some(grads);
    debug_assert!(!out.kappa_pos.is_empty() || out.skipped);
    Ok(out)
}

/// Mean loss and gradient over the non-skipped samples of a batch.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: GradBuffer,
    pub used: usize,
    pub skipped: usize,
}

pub fn batch_loss(dataset: &Dataset, samples: &[TrainingSample], params: &EmbedParams, cfg: &TrainConfig) -> Result<BatchLoss> {
    let per_sample: Vec<SampleLoss> = samples
        .par_iter()
        .map(|s| margin_loss(dataset, s, params, cfg))
        .collect::<Result<_>>()?;
    Ok(reduce(per_sample, params))
}

fn reduce(per_sample: Vec<SampleLoss>, params: &EmbedParams) -> BatchLoss {
    let used = per_sample.iter().filter(|s| !s.skipped).count();
    let mut grads = GradBuffer::zeros_like(params);
    let mut loss = 0.0;
    if used > 0 {
        let scale = 1.0 / used as f64;
        for s in per_sample.iter().filter(|s| !s.skipped) {
            loss += s.loss;
            grads.add_scaled(s.grads.as_ref().expect("gradients requested"), scale);
        }
        loss *= scale;
    }
    BatchLoss {
        loss,
        grads,
        used,
        skipped: per_sample.len() - used,
    }
}

/// Loss only, same reduction as [`batch_loss`]. Used as the finite-difference target.
pub fn batch_loss_value(dataset: &Dataset, samples: &[TrainingSample], params: &EmbedParams, cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    for s in samples {
        if let Some(l) = margin_loss_value(dataset, s, params, cfg)? {
            total += l;
            used += 1;
        }
    }
    Ok(if used > 0 { total / used as f64 } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: GradBuffer,
    pub v: GradBuffer,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &EmbedParams) -> Self {
        AdamState {
            m: GradBuffer::zeros_like(params),
            v: GradBuffer::zeros_like(params),
            step: 0,
        }
    }
}

/// One Adam update with L2 weight decay added to the raw gradient.
pub fn adam_step(params: &mut EmbedParams, grads: &GradBuffer, state: &mut AdamState, learning_rate: f64, weight_decay: f64) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite gradient at optimizer step {}",
            state.step + 1
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let tensors = params.tensors_mut().into_iter();
    let moments = state.m.tensors_mut().into_iter().zip(state.v.tensors_mut());
    for ((theta, g), (m, v)) in tensors.zip(grads.tensors()).zip(moments) {
        for k in 0..theta.len() {
            let gk = g[k] + weight_decay * theta[k];
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            theta[k] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub skipped: usize,
}

/// Sidecar written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub iteration: usize,
    pub config: TrainConfig,
}

pub const CHECKPOINT_FILE: &str = "model.cvck";
pub const CHECKPOINT_META_FILE: &str = "model.toml";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const LOSS_LOG_FILE: &str = "loss.jsonl";
const OPTIMIZER_MAGIC: &[u8; 4] = b"CVAD";

/// Deterministic generator for one phase of a run: stream 0 initializes the head,
/// stream `t + 1` drives iteration `t`.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn init_params(cfg: &TrainConfig, feature_dim: usize) -> EmbedParams {
    EmbedParams::init(cfg.head_dims(feature_dim), &mut run_rng(cfg.seed, 0))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: EmbedParams,
    pub log: Vec<LossRecord>,
}

/// Runtime knobs that do not change results.
#[derive(Clone, Debug, Default)]
pub struct TrainRun {
    /// Worker threads for per-sample evaluation; 0 or 1 runs on the calling thread.
    pub workers: usize,
    /// Run directory for checkpoints and the loss log; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from the checkpoint in `out_dir` when one exists.
    pub resume: bool,
}

/// Trains the head from the config seed (or resumes), returning the final parameters
/// and the full loss log. Identical inputs give bit-identical outputs regardless of the
/// worker count, since per-sample gradients are reduced in sample order.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, run: &TrainRun) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init_params(cfg, dataset.feature_dim);
    let mut adam = AdamState::new(&params);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut start = 0;

    if let (true, Some(dir)) = (run.resume, &run.out_dir) {
        if dir.join(CHECKPOINT_FILE).exists() {
            let meta = read_meta(&dir.join(CHECKPOINT_META_FILE))?;
            params = load_checkpoint(&dir.join(CHECKPOINT_FILE))?;
            if params.dims != cfg.head_dims(dataset.feature_dim) {
                return Err(Error::Config("checkpoint dimensions do not match config".into()));
            }
            adam = load_optimizer(&dir.join(OPTIMIZER_FILE), &params)?;
            log = read_loss_log(&dir.join(LOSS_LOG_FILE))?;
            log.truncate(meta.iteration);
            start = meta.iteration;
        }
    }

    let pool = if run.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(run.workers)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        )
    } else {
        None
    };

    if let Some(dir) = &run.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if start == 0 {
            write_checkpoint(dir, &params, &adam, cfg, 0, &log)?;
        }
    }

    for t in start..cfg.iterations {
        let mut rng = run_rng(cfg.seed, t as u64 + 1);
        let batch = sample_training_batch(dataset, cfg, &mut rng)?;
        let step = |params: &EmbedParams| -> Result<Vec<SampleLoss>> {
            batch
                .samples
                .iter()
                .map(|s| margin_loss(dataset, s, params, cfg))
                .collect()
        };
        let per_sample = match &pool {
            Some(pool) => pool.install(|| {
                batch
                    .samples
                    .par_iter()
                    .map(|s| margin_loss(dataset, s, &params, cfg))
                    .collect::<Result<Vec<_>>>()
            })?,
            None => step(&params)?,
        };
        let reduced = reduce(per_sample, &params);
        if !reduced.loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at iteration {t}")));
        }
        if reduced.used > 0 {
            adam_step(&mut params, &reduced.grads, &mut adam, cfg.learning_rate, cfg.weight_decay)?;
        }
        log.push(LossRecord {
            iteration: t,
            loss: reduced.loss,
            skipped: batch.skipped + reduced.skipped,
        });
        if t % 100 == 0 {
            log::debug!("iteration {t}: loss {:.5}", reduced.loss);
        }
        let done = t + 1;
        if let Some(dir) = &run.out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
                write_checkpoint(dir, &params, &adam, cfg, done, &log)?;
            }
        }
    }
    if let Some(dir) = &run.out_dir {
        write_checkpoint(dir, &params, &adam, cfg, log.len(), &log)?;
    }
    Ok(TrainOutcome { params, log })
}

fn write_checkpoint(dir: &Path, params: &EmbedParams, adam: &AdamState, cfg: &TrainConfig, iteration: usize, log: &[LossRecord]) -> Result<()> {
    save_checkpoint(params, &dir.join(CHECKPOINT_FILE))?;
    let meta = CheckpointMeta {
        iteration,
        config: cfg.clone(),
    };
    let meta_path = dir.join(CHECKPOINT_META_FILE);
    let text = toml::to_string_pretty(&meta).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    save_optimizer(&dir.join(OPTIMIZER_FILE), adam)?;
    write_loss_log(&dir.join(LOSS_LOG_FILE), log)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn save_optimizer(path: &Path, adam: &AdamState) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(OPTIMIZER_MAGIC);
    out.extend_from_slice(&adam.step.to_le_bytes());
    for buf in [&adam.m, &adam.v] {
        for t in buf.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn load_optimizer(path: &Path, params: &EmbedParams) -> Result<AdamState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = params.num_params();
    if bytes.len() != 12 + 16 * n || &bytes[..4] != OPTIMIZER_MAGIC {
        return Err(Error::format(path, "optimizer state does not match checkpoint"));
    }
    let mut state = AdamState::new(params);
    state.step = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let mut values = bytes[12..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for buf in [&mut state.m, &mut state.v] {
        for t in buf.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().unwrap();
            }
        }
    }
    Ok(state)
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in log {
        let line = serde_json::to_string(rec).expect("loss record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))
        })
        .collect()
}

/// Finite-difference check of the full batch-loss gradient (head, cosine, Γ, margin) at a
/// fresh initialization on a small synthetic dataset.
pub fn gradient_check(seed: u64, num_coords: usize) -> Result<GradCheckReport> {
    let synth = crate::synth::SynthConfig {
        videos_per_class: 2,
        frames_per_video: 12,
        parts_per_video: 3,
        feature_dim: 16,
        seed,
        ..Default::default()
    };
    let dataset = crate::synth::generate_dataset(&synth)?;
    let cfg = TrainConfig {
        hidden_dim: 16,
        embed_dim: 16,
        batch_pairs: 2,
        num_chunks: 6,
        seed,
        ..Default::default()
    };
    let params = init_params(&cfg, dataset.feature_dim);
    let batch = sample_training_batch(&dataset, &cfg, &mut run_rng(seed, 1))?;
    let analytic = batch_loss(&dataset, &batch.samples, &params, &cfg)?;
    let loss = |p: &EmbedParams| batch_loss_value(&dataset, &batch.samples, p, &cfg).unwrap_or(f64::NAN);
    let report = finite_diff_check(&params, loss, &analytic.grads, num_coords, 1e-5, &mut run_rng(seed, 2));
    if report.max_rel_error.is_nan() {
        return Err(Error::Numerical("gradient check produced NaN".into()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_config_key_is_an_error() {
        let err = TrainConfig::from_toml("learning_rate = 0.001\nlearnig_rate = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn config_invariants() {
        for text in ["learning_rate = 0.0", "margin = -1.0", "iou_pos_threshold = 1.5", "iou_pos_threshold = 0.0"] {
            assert!(TrainConfig::from_toml(text).is_err(), "{text}");
        }
        let cfg = TrainConfig::from_toml("margin = 0.25\nseed = 3").unwrap();
        assert_eq!((cfg.margin, cfg.seed, cfg.batch_pairs), (0.25, 3, 8));
    }

    fn tiny_params() -> EmbedParams {
        EmbedParams::init(
            HeadDims {
                input: 3,
                hidden: 4,
                output: 2,
            },
            &mut ChaCha8Rng::seed_from_u64(1),
        )
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = GradBuffer::zeros_like(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, 1e-3, 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let mut g = GradBuffer::zeros_like(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        }
        adam_step(&mut p, &g, &mut st, 1e-4, 0.0).unwrap();
        for c in 0..p.num_params() {
            let delta = *p.coord_mut(c) - *before.clone().coord_mut(c);
            let expect = -1e-4 * g.coord(c).signum();
            assert!((delta - expect).abs() < 1e-9, "{delta} vs {expect}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = tiny_params();
        let mut st = AdamState::new(&p);
        let mut g = GradBuffer::zeros_like(&p);
        g.b2[0] = f64::NAN;
        assert!(matches!(adam_step(&mut p, &g, &mut st, 1e-3, 0.0), Err(Error::Numerical(_))));
    }

    #[test]
    fn adam_decreases_convex_quadratic() {
        // f(θ) = |θ|², gradient 2θ.
        let mut p = tiny_params();
        let mut st = AdamState::new(&p);
        let f = |p: &EmbedParams| p.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>();
        let mut losses = vec![f(&p)];
        for _ in 0..100 {
            let mut g = GradBuffer::zeros_like(&p);
            for (dst, src) in g.tensors_mut().into_iter().zip(p.tensors()) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = 2.0 * s;
                }
            }
            adam_step(&mut p, &g, &mut st, 1e-2, 0.0).unwrap();
            losses.push(f(&p));
        }
        assert!(losses.windows(2).skip(1).all(|w| w[1] < w[0]));
    }

    #[test]
    fn jittered_box_overlaps_enough() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = BoundingBox {
            x: 10.0,
            y: 20.0,
            w: 16.0,
            h: 12.0,
        };
        for _ in 0..1000 {
            let j = jitter_box(&b, 0.5, &mut rng);
            assert!(iou(&b, &j) >= 0.5);
        }
        assert!(iou(&b, &jitter_box(&b, 1.0, &mut rng)) >= 1.0);
    }
}
