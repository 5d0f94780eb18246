//! On-disk dataset layout.
//!
//! A dataset is a TOML manifest plus one binary feature file per video and an optional
//! JSON ground-truth sidecar. Paths inside the manifest are relative to the manifest's
//! directory.
//!
//! Feature file, all integers `u32` and all reals `f32`, little-endian:
//!
//! ```text
//! magic "CVCC" | version (=1) | num_tracks | feature_dim
//! per track:  track_id | num_patches
//! per patch:  frame_id | x y w h | feature[feature_dim]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, Dataset, FrameKeypoints, PatchRef, Track, VideoClip};

pub const FEATURE_MAGIC: &[u8; 4] = b"CVCC";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub feature_dim: usize,
    #[serde(default)]
    pub videos: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub class_label: String,
    pub num_frames: u32,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    /// Feature extractor provenance, recorded by exporters and never read by the engine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling: Option<String>,
}

/// Optional per-video evaluation labels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_state: Option<Vec<f64>>,
    /// track id -> part label of each patch, in track order
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub part_labels: BTreeMap<u32, Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keypoints: Option<Vec<FrameKeypoints>>,
}

impl GroundTruth {
    fn is_empty(&self) -> bool {
        self.latent_state.is_none() && self.part_labels.is_empty() && self.keypoints.is_none()
    }

    pub fn of(video: &VideoClip) -> Self {
        let part_labels = video
            .tracks
            .iter()
            .filter(|t| t.patches.iter().all(|p| p.part_label.is_some()))
            .map(|t| {
                let labels = t.patches.iter().map(|p| p.part_label.unwrap()).collect();
                (t.track_id, labels)
            })
            .collect();
        GroundTruth {
            latent_state: video.latent_state.clone(),
            part_labels,
            keypoints: video.keypoints.clone(),
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads and fully validates a dataset from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    if manifest.videos.is_empty() {
        return Err(Error::format(manifest_path, "manifest lists no videos"));
    }
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let feature_path = base.join(&entry.features);
        let tracks = read_feature_file(&feature_path, manifest.feature_dim)
            .map_err(|e| match e {
                Error::Format { path, msg } => Error::Format {
                    path,
                    msg: format!("video {}: {msg}", entry.id),
                },
                other => other,
            })?;
        let mut video = VideoClip {
            video_id: entry.id.clone(),
            class_label: entry.class_label.clone(),
            num_frames: entry.num_frames,
            tracks,
            latent_state: None,
            keypoints: None,
        };
        if let Some(rel) = &entry.ground_truth {
            let gt_path = base.join(rel);
            let gt = read_ground_truth(&gt_path)?;
            apply_ground_truth(&mut video, gt, &gt_path)?;
        }
        video.validate(manifest.feature_dim)?;
        videos.push(video);
    }
    Dataset::new(manifest.feature_dim, videos)
}

fn apply_ground_truth(video: &mut VideoClip, gt: GroundTruth, path: &Path) -> Result<()> {
    for (track_id, labels) in gt.part_labels {
        let Some(track) = video.tracks.iter_mut().find(|t| t.track_id == track_id) else {
            return Err(Error::format(
                path,
                format!("video {}: labels for unknown track {track_id}", video.video_id),
            ));
        };
        if labels.len() != track.patches.len() {
            return Err(Error::format(
                path,
                format!(
                    "video {}: track {track_id} has {} patches but {} labels",
                    video.video_id,
                    track.patches.len(),
                    labels.len()
                ),
            ));
        }
        for (patch, label) in track.patches.iter_mut().zip(labels) {
            patch.part_label = Some(label);
        }
    }
    video.latent_state = gt.latent_state;
    video.keypoints = gt.keypoints;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated file while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a feature file. Structural checks (monotone frames, box validity) are left to
/// [`VideoClip::validate`], which reports them with the owning video id.
pub fn read_feature_file(path: &Path, expected_dim: usize) -> Result<Vec<Track>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        buf: &buf,
        pos: 0,
        path,
    };
    if cur.take(4, "magic")? != FEATURE_MAGIC {
        return Err(Error::format(path, "bad magic, expected \"CVCC\""));
    }
    let version = cur.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {version} (expected {FEATURE_VERSION})"),
        ));
    }
    let num_tracks = cur.u32("num_tracks")?;
    let dim = cur.u32("feature_dim")? as usize;
    if dim != expected_dim {
        return Err(Error::format(
            path,
            format!("feature dimension mismatch: file has {dim}, manifest declares {expected_dim}"),
        ));
    }
    let mut tracks = Vec::with_capacity(num_tracks as usize);
    for _ in 0..num_tracks {
        let track_id = cur.u32("track_id")?;
        let num_patches = cur.u32("num_patches")?;
        let mut patches = Vec::with_capacity(num_patches as usize);
        for _ in 0..num_patches {
            let frame_id = cur.u32("frame_id")?;
            let bbox = BoundingBox {
                x: cur.f32("box")?,
                y: cur.f32("box")?,
                w: cur.f32("box")?,
                h: cur.f32("box")?,
            };
            let raw = cur.take(4 * dim, "feature")?;
            let feature = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            patches.push(PatchRef {
                track_id,
                frame_id,
                bbox,
                feature,
                part_label: None,
            });
        }
        tracks.push(Track { track_id, patches });
    }
    if cur.pos != buf.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after last track", buf.len() - cur.pos),
        ));
    }
    Ok(tracks)
}

pub fn encode_feature_file(tracks: &[Track], feature_dim: usize) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(tracks.len() as u32).to_le_bytes());
    out.extend_from_slice(&(feature_dim as u32).to_le_bytes());
    for t in tracks {
        out.extend_from_slice(&t.track_id.to_le_bytes());
        out.extend_from_slice(&(t.patches.len() as u32).to_le_bytes());
        for p in &t.patches {
            out.extend_from_slice(&p.frame_id.to_le_bytes());
            for v in [p.bbox.x, p.bbox.y, p.bbox.w, p.bbox.h] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in &p.feature {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn check_file_stem(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::validation(id, "video id is not usable as a file name"))
    }
}

/// Writes `dataset` under `dir` as `manifest.toml`, `features/<id>.cvcc` and, when a
/// video carries labels, `truth/<id>.json`. Returns the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let mut manifest = Manifest {
        feature_dim: dataset.feature_dim,
        videos: Vec::with_capacity(dataset.videos.len()),
    };
    for video in &dataset.videos {
        check_file_stem(&video.video_id)?;
        let features = PathBuf::from("features").join(format!("{}.cvcc", video.video_id));
        write_file(
            &dir.join(&features),
            &encode_feature_file(&video.tracks, dataset.feature_dim),
        )?;
        let gt = GroundTruth::of(video);
        let ground_truth = if gt.is_empty() {
            None
        } else {
            let rel = PathBuf::from("truth").join(format!("{}.json", video.video_id));
            let text = serde_json::to_string_pretty(&gt).expect("ground truth serializes");
            write_file(&dir.join(&rel), text.as_bytes())?;
            Some(rel)
        };
        manifest.videos.push(ManifestEntry {
            id: video.video_id.clone(),
            class_label: video.class_label.clone(),
            num_frames: video.num_frames,
            features,
            ground_truth,
            backbone: None,
            pooling: None,
        });
    }
    let path = dir.join("manifest.toml");
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    write_file(&path, text.as_bytes())?;
    Ok(path)
}
