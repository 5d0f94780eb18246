//! Synthetic datasets with known action progress, part identities and cross-video
//! ground truth.
//!
//! Each class owns a set of smooth per-part appearance trajectories through a signal
//! subspace; a video walks those trajectories at its own speed. Every patch of a video
//! also carries the same large offset, drawn per video from a fixed nuisance subspace
//! that overlaps the signal directions; it makes raw cosine similarity across videos
//! close to uninformative. The remaining dimensions hold clutter, part fixed along the
//! track and part drawn afresh for every patch.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, Dataset, PatchRef, Track, VideoClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub parts_per_video: usize,
    pub feature_dim: usize,
    /// Standard deviation of per-coordinate Gaussian noise.
    pub state_noise: f64,
    /// Norm of the clutter vector relative to the unit-norm part signal.
    pub distractor_scale: f64,
    /// Share of the clutter that stays fixed along a track (0: fresh per patch, 1: static).
    pub distractor_persistence: f64,
    /// Norm of a per-video offset shared by every patch of the clip. It lives in a fixed
    /// random subspace that overlaps the signal directions.
    pub video_offset_scale: f64,
    /// Norm of the static per-part identity vector relative to the progress signal.
    pub identity_scale: f64,
    /// Spread (log-space standard deviation) of per-video speed exponents.
    pub speed_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 2,
            videos_per_class: 8,
            frames_per_video: 24,
            parts_per_video: 4,
            feature_dim: 64,
            state_noise: 0.05,
            distractor_scale: 0.5,
            distractor_persistence: 0.0,
            video_offset_scale: 22.0,
            identity_scale: 1.0,
            speed_spread: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_classes == 0 || self.videos_per_class == 0 {
            return bad("need at least one class and one video per class");
        }
        if self.parts_per_video < 2 {
            return bad("parts_per_video must be at least 2");
        }
        if self.frames_per_video < 8 {
            return bad("frames_per_video must be at least 8");
        }
        if self.feature_dim < 4 {
            return bad("feature_dim must be at least 4");
        }
        if !(self.distractor_scale >= 0.0 && self.distractor_scale.is_finite()) {
            return bad("distractor_scale must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.distractor_persistence) {
            return bad("distractor_persistence must lie in [0, 1]");
        }
        if !(self.state_noise >= 0.0 && self.state_noise.is_finite()) {
            return bad("state_noise must be non-negative");
        }
        if !(self.identity_scale >= 0.0 && self.speed_spread >= 0.0) {
            return bad("identity_scale and speed_spread must be non-negative");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn signal_dim(&self) -> usize {
        self.feature_dim / 2
    }
}

const HARMONICS: usize = 4;
const NUISANCE_DIM: usize = 8;
const BOX_SIZE: f32 = 24.0;
const PART_SPACING: f32 = 48.0;

struct ClassModel {
    /// Orthonormal directions, one per harmonic.
    basis: Vec<Vec<f64>>,
    /// `[part][harmonic]`
    phases: Vec<Vec<f64>>,
    identity: Vec<Vec<f64>>,
    speed: f64,
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Gram-Schmidt on Gaussian draws.
fn orthonormal<R: Rng + ?Sized>(rng: &mut R, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian_vec(rng, dim);
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            normalize(&mut v);
            out.push(v);
        }
    }
    out
}

impl ClassModel {
    fn new<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Self {
        let s = cfg.signal_dim();
        let basis = orthonormal(rng, HARMONICS.min(s), s);
        let phases = (0..cfg.parts_per_video)
            .map(|_| (0..basis.len()).map(|_| rng.random_range(0.0..2.0 * PI)).collect())
            .collect();
        let identity = (0..cfg.parts_per_video)
            .map(|_| {
                let mut v = gaussian_vec(rng, s);
                normalize(&mut v);
                v
            })
            .collect();
        let speed = rng.random_range(0.7..1.4);
        ClassModel {
            basis,
            phases,
            identity,
            speed,
        }
    }

    /// Progress-dependent appearance of `part` at progress `theta`, unit norm on average.
    fn signal(&self, part: usize, theta: f64, identity_scale: f64) -> Vec<f64> {
        let s = self.basis[0].len();
        let amp = (2.0 / self.basis.len() as f64).sqrt();
        let mut out = vec![0.0; s];
        for (h, (u, phase)) in self.basis.iter().zip(&self.phases[part]).enumerate() {
            let c = amp * (PI * (h + 1) as f64 * theta + phase).cos();
            out.iter_mut().zip(u).for_each(|(o, b)| *o += c * b);
        }
        out.iter_mut()
            .zip(&self.identity[part])
            .for_each(|(o, b)| *o += identity_scale * b);
        out
    }
}

/// Generates a dataset; equal configs give bit-identical datasets.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes: Vec<ClassModel> = (0..cfg.num_classes).map(|_| ClassModel::new(cfg, &mut rng)).collect();
    let nuisance = orthonormal(&mut rng, NUISANCE_DIM.min(cfg.signal_dim()), cfg.signal_dim());
    let noise = Normal::new(0.0, cfg.state_noise).map_err(|e| Error::Config(e.to_string()))?;
    let dist_dim = cfg.feature_dim - cfg.signal_dim();
    let frames = cfg.frames_per_video;

    let mut videos = Vec::with_capacity(cfg.num_classes * cfg.videos_per_class);
    for (c, model) in classes.iter().enumerate() {
        for vix in 0..cfg.videos_per_class {
            let mut offset = vec![0.0; cfg.signal_dim()];
            offset.resize(cfg.feature_dim, 0.0);
            for n in &nuisance {
                let g: f64 = rng.sample(StandardNormal);
                offset.iter_mut().zip(n).for_each(|(o, b)| *o += g * b);
            }
            normalize(&mut offset);
            offset.iter_mut().for_each(|x| *x *= cfg.video_offset_scale);
            let exponent = model.speed * (cfg.speed_spread * rng.sample::<f64, _>(StandardNormal)).exp();
            let latent: Vec<f64> = (0..frames)
                .map(|t| (t as f64 / (frames - 1) as f64).powf(exponent))
                .collect();

            // Track order and ids are shuffled so neither reveals the part.
            let mut order: Vec<usize> = (0..cfg.parts_per_video).collect();
            order.shuffle(&mut rng);
            let mut ids: Vec<u32> = (0..cfg.parts_per_video as u32).collect();
            ids.shuffle(&mut rng);

            let mut tracks = Vec::with_capacity(cfg.parts_per_video);
            for (slot, &part) in order.iter().enumerate() {
                let track_id = ids[slot];
                let mut track_clutter = gaussian_vec(&mut rng, dist_dim);
                normalize(&mut track_clutter);
                let keep = cfg.distractor_persistence.sqrt();
                let fresh = (1.0 - cfg.distractor_persistence).sqrt();
                let wobble = rng.random_range(0.0..2.0 * PI);
                let base_x = 16.0 + PART_SPACING * part as f32 + rng.random_range(-4.0..4.0);
                let base_y = 40.0 + rng.random_range(-4.0..4.0);

                let patches = (0..frames)
                    .map(|t| {
                        let theta = latent[t];
                        let mut feature: Vec<f64> = model.signal(part, theta, cfg.identity_scale);
                        let mut clutter: Vec<f64> = gaussian_vec(&mut rng, dist_dim);
                        normalize(&mut clutter);
                        clutter.iter_mut().zip(&track_clutter).for_each(|(c, t)| *c = keep * t + fresh * *c);
                        normalize(&mut clutter);
                        feature.extend(clutter.iter().map(|x| x * cfg.distractor_scale));
                        let feature = feature
                            .into_iter()
                            .zip(&offset)
                            .map(|(x, o)| (x + o + noise.sample(&mut rng)) as f32)
                            .collect();
                        let dx = 6.0 * (2.0 * PI * theta + wobble).sin();
                        let dy = 6.0 * (2.0 * PI * theta + wobble).cos();
                        PatchRef {
                            track_id,
                            frame_id: t as u32,
                            bbox: BoundingBox {
                                x: base_x + dx as f32,
                                y: base_y + dy as f32,
                                w: BOX_SIZE,
                                h: BOX_SIZE,
                            },
                            feature,
                            part_label: Some(part as u32),
                        }
                    })
                    .collect();
                tracks.push(Track { track_id, patches });
            }
            videos.push(VideoClip {
                video_id: format!("c{c}_v{vix:02}"),
                class_label: format!("class{c}"),
                num_frames: frames as u32,
                tracks,
                latent_state: Some(latent),
                keypoints: None,
            });
        }
    }
    Dataset::new(cfg.feature_dim, videos)
}

/// Ground-truth correspondence between two labelled videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleAlignment {
    /// For every frame of V, the frame of W with the nearest latent state.
    pub frame_map: Vec<u32>,
    /// For every track of V (by track id), the track of W with the same part label.
    pub track_map: Vec<(u32, Option<u32>)>,
}

impl OracleAlignment {
    pub fn track_for(&self, v_track_id: u32) -> Option<u32> {
        self.track_map
            .iter()
            .find(|(t, _)| *t == v_track_id)
            .and_then(|(_, w)| *w)
    }
}

pub fn oracle_alignment(v: &VideoClip, w: &VideoClip) -> Result<OracleAlignment> {
    let sv = v
        .latent_state
        .as_ref()
        .ok_or_else(|| Error::MissingGroundTruth(v.video_id.clone()))?;
    let sw = w
        .latent_state
        .as_ref()
        .ok_or_else(|| Error::MissingGroundTruth(w.video_id.clone()))?;
    if sw.is_empty() {
        return Err(Error::MissingGroundTruth(w.video_id.clone()));
    }
    let frame_map = sv
        .iter()
        .map(|a| {
            let mut best = 0usize;
            for (p, b) in sw.iter().enumerate() {
                if (a - b).abs() < (a - sw[best]).abs() {
                    best = p;
                }
            }
            best as u32
        })
        .collect();
    let mut track_map = Vec::with_capacity(v.tracks.len());
    for t in &v.tracks {
        let label = t
            .part_label()
            .ok_or_else(|| Error::MissingGroundTruth(v.video_id.clone()))?;
        let mut matched = None;
        for u in &w.tracks {
            match u.part_label() {
                Some(l) if l == label => {
                    matched = Some(u.track_id);
                    break;
                }
                Some(_) => {}
                None => return Err(Error::MissingGroundTruth(w.video_id.clone())),
            }
        }
        track_map.push((t.track_id, matched));
    }
    Ok(OracleAlignment {
        frame_map,
        track_map,
    })
}
