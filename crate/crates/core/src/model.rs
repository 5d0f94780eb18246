//! Domain types shared by every stage: boxes, patches, tracks, clips and datasets,
//! plus box overlap and the chunked frame sampler used for training and inference.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `(x, y)` being the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BoundingBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::Config(format!(
                "invalid box ({x}, {y}, {w}, {h}): width and height must be positive and finite"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn area(&self) -> f64 {
        self.w as f64 * self.h as f64
    }

    pub fn contains(&self, px: f32, py: f32) -> bool {
        px >= self.x && px <= self.x + self.w && py >= self.y && py <= self.y + self.h
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0) = (a.x as f64, a.y as f64);
    let (ax1, ay1) = (ax0 + a.w as f64, ay0 + a.h as f64);
    let (bx0, by0) = (b.x as f64, b.y as f64);
    let (bx1, by1) = (bx0 + b.w as f64, by0 + b.h as f64);

    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// One tracked patch: a box in one frame together with its raw backbone feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRef {
    pub track_id: u32,
    pub frame_id: u32,
    pub bbox: BoundingBox,
    pub feature: Vec<f32>,
    /// Ground-truth part identity; only evaluation code reads it.
    pub part_label: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub track_id: u32,
    /// Sorted by strictly increasing `frame_id`.
    pub patches: Vec<PatchRef>,
}

impl Track {
    pub fn patch_index_at(&self, frame_id: u32) -> Option<usize> {
        self.patches
            .binary_search_by_key(&frame_id, |p| p.frame_id)
            .ok()
    }

    pub fn patch_at(&self, frame_id: u32) -> Option<&PatchRef> {
        self.patch_index_at(frame_id).map(|ix| &self.patches[ix])
    }

    /// Part label of the track, taken from its first labelled patch.
    pub fn part_label(&self) -> Option<u32> {
        self.patches.iter().find_map(|p| p.part_label)
    }
}

/// Named 2-D keypoints of one frame.
pub type FrameKeypoints = BTreeMap<String, [f32; 2]>;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub video_id: String,
    pub class_label: String,
    pub num_frames: u32,
    pub tracks: Vec<Track>,
    /// Per-frame action progress in `[0, 1]` (synthetic ground truth).
    pub latent_state: Option<Vec<f64>>,
    pub keypoints: Option<Vec<FrameKeypoints>>,
}

impl VideoClip {
    /// Checks every structural invariant of the clip against the dataset feature width.
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::validation(&self.video_id, msg));
        if self.tracks.is_empty() {
            return fail("clip has no tracks".into());
        }
        for track in &self.tracks {
            if track.patches.is_empty() {
                return fail(format!("track {} is empty", track.track_id));
            }
            let mut prev: Option<u32> = None;
            for (ix, patch) in track.patches.iter().enumerate() {
                let at = format!("track {} patch {ix} (frame {})", track.track_id, patch.frame_id);
                if patch.track_id != track.track_id {
                    return fail(format!("{at}: carries track id {}", patch.track_id));
                }
                if let Some(p) = prev {
                    if patch.frame_id <= p {
                        return fail(format!("{at}: frame ids not strictly increasing"));
                    }
                }
                prev = Some(patch.frame_id);
                if patch.frame_id >= self.num_frames {
                    return fail(format!("{at}: frame id beyond num_frames {}", self.num_frames));
                }
                if !patch.bbox.is_valid() {
                    return fail(format!("{at}: invalid box {:?}", patch.bbox));
                }
                if patch.feature.len() != feature_dim {
                    return fail(format!(
                        "{at}: feature length {} != feature_dim {feature_dim}",
                        patch.feature.len()
                    ));
                }
                if patch.feature.iter().any(|v| !v.is_finite()) {
                    return fail(format!("{at}: non-finite feature value"));
                }
            }
        }
        let mut ids: Vec<u32> = self.tracks.iter().map(|t| t.track_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return fail("duplicate track id".into());
        }
        if let Some(states) = &self.latent_state {
            if states.len() != self.num_frames as usize {
                return fail(format!(
                    "latent_state has {} entries for {} frames",
                    states.len(),
                    self.num_frames
                ));
            }
            if states.iter().any(|s| !s.is_finite()) {
                return fail("non-finite latent state".into());
            }
        }
        if let Some(kps) = &self.keypoints {
            if kps.len() != self.num_frames as usize {
                return fail(format!(
                    "keypoints have {} frames for {} frames",
                    kps.len(),
                    self.num_frames
                ));
            }
        }
        Ok(())
    }

    /// Patches present in `frame_id`, as `(track index, patch)`, in track order.
    pub fn patches_in_frame(&self, frame_id: u32) -> impl Iterator<Item = (usize, &PatchRef)> {
        self.tracks
            .iter()
            .enumerate()
            .filter_map(move |(ix, t)| t.patch_at(frame_id).map(|p| (ix, p)))
    }

    pub fn track_index(&self, track_id: u32) -> Option<usize> {
        self.tracks.iter().position(|t| t.track_id == track_id)
    }

    pub fn num_patches(&self) -> usize {
        self.tracks.iter().map(|t| t.patches.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub videos: Vec<VideoClip>,
    /// class label -> indices into `videos`
    pub class_index: BTreeMap<String, Vec<usize>>,
}

impl Dataset {
    pub fn new(feature_dim: usize, videos: Vec<VideoClip>) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        let mut class_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for (ix, v) in videos.iter().enumerate() {
            v.validate(feature_dim)?;
            if !seen.insert(v.video_id.as_str()) {
                return Err(Error::validation(&v.video_id, "duplicate video id"));
            }
            class_index.entry(v.class_label.clone()).or_default().push(ix);
        }
        Ok(Dataset {
            feature_dim,
            videos,
            class_index,
        })
    }

    pub fn video_index(&self, video_id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.video_id == video_id)
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoClip> {
        self.video_index(video_id).map(|ix| &self.videos[ix])
    }

    /// Dataset restricted to the videos for which `keep` returns true.
    pub fn filter(&self, mut keep: impl FnMut(&VideoClip) -> bool) -> Result<Dataset> {
        let videos = self.videos.iter().filter(|v| keep(v)).cloned().collect();
        Dataset::new(self.feature_dim, videos)
    }
}

/// Draws one frame uniformly from each of `num_chunks` contiguous chunks.
///
/// Chunk `c` covers frames `[floor(c*N/C), floor((c+1)*N/C))`. When the clip has fewer
/// frames than chunks the empty chunks are dropped, so the result can be shorter than
/// `num_chunks`. The output is always strictly increasing.
pub fn sample_frame_sequence<R: Rng + ?Sized>(
    video: &VideoClip,
    num_chunks: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    if num_chunks == 0 {
        return Err(Error::Config("num_chunks must be at least 1".into()));
    }
    chunked_frames(video.num_frames as usize, num_chunks, rng)
        .ok_or_else(|| Error::validation(&video.video_id, "cannot sample frames from an empty video"))
}

pub(crate) fn chunked_frames<R: Rng + ?Sized>(
    num_frames: usize,
    num_chunks: usize,
    rng: &mut R,
) -> Option<Vec<u32>> {
    if num_frames == 0 {
        return None;
    }
    let mut out = Vec::with_capacity(num_chunks);
    for c in 0..num_chunks {
        let lo = c * num_frames / num_chunks;
        let hi = (c + 1) * num_frames / num_chunks;
        if hi <= lo {
            continue;
        }
        let f = if hi - lo == 1 { lo } else { rng.random_range(lo..hi) };
        out.push(f as u32);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f32, y: f32, w: f32, h: f32) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn clip(num_frames: u32) -> VideoClip {
        VideoClip {
            video_id: "v".into(),
            class_label: "c".into(),
            num_frames,
            tracks: vec![],
            latent_state: None,
            keypoints: None,
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 1.0, 1.0)), 0.0);
        let v = iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 2.0, 2.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BoundingBox::new(f32::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn sixteen_frames_eight_chunks() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = sample_frame_sequence(&clip(16), 8, &mut rng).unwrap();
            assert_eq!(seq.len(), 8);
            for (k, f) in seq.iter().enumerate() {
                assert!(*f == 2 * k as u32 || *f == 2 * k as u32 + 1);
            }
        }
    }

    #[test]
    fn short_videos() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = sample_frame_sequence(&clip(8), 8, &mut rng).unwrap();
        assert_eq!(seq, (0..8).collect::<Vec<_>>());
        let seq = sample_frame_sequence(&clip(5), 8, &mut rng).unwrap();
        assert_eq!(seq, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_video_and_zero_chunks_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_frame_sequence(&clip(0), 8, &mut rng).is_err());
        assert!(sample_frame_sequence(&clip(10), 0, &mut rng).is_err());
    }

    #[test]
    fn sequences_strictly_increasing_over_many_lengths() {
        let mut meta = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10_000 {
            let len = meta.random_range(1..200u32);
            let chunks = meta.random_range(1..16usize);
            let mut rng = ChaCha8Rng::seed_from_u64(meta.random());
            let seq = sample_frame_sequence(&clip(len), chunks, &mut rng).unwrap();
            assert!(seq.windows(2).all(|w| w[0] < w[1]));
            assert!(seq.iter().all(|&f| f < len));
            assert_eq!(seq.len(), chunks.min(len as usize));
        }
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0f32..50.0, -50.0f32..50.0, 0.1f32..40.0, 0.1f32..40.0)
            .prop_map(|(x, y, w, h)| BoundingBox { x, y, w, h })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
            if a != b {
                prop_assert!(ab < 1.0);
            }
        }
    }
}
