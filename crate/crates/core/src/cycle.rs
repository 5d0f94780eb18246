//! Cross-video cycles.
//!
//! A cycle starts at patch `(track i, position m)` of the sampled sequence of video V,
//! follows track `i` forward to position `n`, jumps to track `j` of W at position `q`,
//! follows `j` backward to position `p`, and jumps back to track `k` of V at `m`.
//! Tracking jumps are free; the two cross-video jumps are scored by cosine similarity,
//! so every cycle score lies in `[-2, 2]`.
//!
//! All positions are indices into the sampled frame sequences, not raw frame ids.

use serde::{Deserialize, Serialize};

use crate::embed::{cosine_sim, Embed};
use crate::error::{Error, Result};
use crate::model::{PatchRef, VideoClip};

/// A clip restricted to a sampled frame sequence, with dense `(position, track)` slots.
#[derive(Clone, Debug)]
pub struct SequenceView<'a> {
    pub video: &'a VideoClip,
    pub frames: Vec<u32>,
    /// `[position][track] -> slot`
    slot_of: Vec<Vec<Option<usize>>>,
    /// `slot -> (position, track, patch index within the track)`
    slots: Vec<(usize, usize, usize)>,
}

impl<'a> SequenceView<'a> {
    pub fn new(video: &'a VideoClip, frames: Vec<u32>) -> Self {
        let mut slot_of = vec![vec![None; video.tracks.len()]; frames.len()];
        let mut slots = Vec::new();
        for (pos, &frame) in frames.iter().enumerate() {
            for (t, track) in video.tracks.iter().enumerate() {
                if let Some(ix) = track.patch_index_at(frame) {
                    slot_of[pos][t] = Some(slots.len());
                    slots.push((pos, t, ix));
                }
            }
        }
        SequenceView {
            video,
            frames,
            slot_of,
            slots,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_tracks(&self) -> usize {
        self.video.tracks.len()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, pos: usize, track: usize) -> Option<usize> {
        self.slot_of.get(pos)?.get(track).copied().flatten()
    }

    pub fn has(&self, pos: usize, track: usize) -> bool {
        self.slot(pos, track).is_some()
    }

    pub fn slot_location(&self, slot: usize) -> (usize, usize) {
        let (pos, track, _) = self.slots[slot];
        (pos, track)
    }

    pub fn slot_patch(&self, slot: usize) -> &'a PatchRef {
        let (_, track, ix) = self.slots[slot];
        &self.video.tracks[track].patches[ix]
    }

    pub fn patch(&self, pos: usize, track: usize) -> Option<&'a PatchRef> {
        self.slot(pos, track).map(|s| self.slot_patch(s))
    }

    /// Embeds every slot, in slot order.
    pub fn embed_slots(&self, embedder: &dyn Embed) -> Vec<Vec<f64>> {
        (0..self.slots.len())
            .map(|s| embedder.embed(&self.slot_patch(s).feature))
            .collect()
    }
}

/// Index tuple of one candidate cycle `{V^i_{m:n}, W^j_{p:q}, V^k_m}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cycle {
    pub i: usize,
    pub m: usize,
    pub n: usize,
    pub j: usize,
    pub p: usize,
    pub q: usize,
    pub k: usize,
}

/// The part of a cycle that does not depend on the landing track.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CyclePath {
    pub n: usize,
    pub j: usize,
    pub p: usize,
    pub q: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleOptions {
    /// Minimum number of sampled frames spanned by the backward segment in W.
    pub min_segment_len: usize,
    /// When false, frames are assumed aligned: only `p = m`, `q = n` with the shortest
    /// admissible segment is considered.
    pub temporal_search: bool,
}

impl Default for CycleOptions {
    fn default() -> Self {
        CycleOptions {
            min_segment_len: 4,
            temporal_search: true,
        }
    }
}

impl CycleOptions {
    fn span(&self) -> usize {
        self.min_segment_len.max(1) - 1
    }
}

/// All `(n, j, p, q)` paths leaving anchor `(i, m)`, in lexicographic order.
pub fn cycle_paths(v: &SequenceView, w: &SequenceView, i: usize, m: usize, opts: CycleOptions) -> Vec<CyclePath> {
    let mut out = Vec::new();
    if !v.has(m, i) {
        return out;
    }
    let span = opts.span();
    if opts.temporal_search {
        for n in m + 1..v.len() {
            if !v.has(n, i) {
                continue;
            }
            for j in 0..w.num_tracks() {
                for p in 0..w.len() {
                    if !w.has(p, j) {
                        continue;
                    }
                    for q in p + span..w.len() {
                        if w.has(q, j) {
                            out.push(CyclePath { n, j, p, q });
                        }
                    }
                }
            }
        }
    } else {
        let n = m + span.max(1);
        if n < v.len() && n < w.len() && v.has(n, i) {
            for j in 0..w.num_tracks() {
                if w.has(m, j) && w.has(n, j) {
                    out.push(CyclePath { n, j, p: m, q: n });
                }
            }
        }
    }
    out
}

/// Every feasible cycle from `V^i_m` back to `V^k_m`. Empty when none exists.
pub fn enumerate_cycles(
    v: &SequenceView,
    w: &SequenceView,
    i: usize,
    k: usize,
    m: usize,
    opts: CycleOptions,
) -> Vec<Cycle> {
    if !v.has(m, k) {
        return Vec::new();
    }
    cycle_paths(v, w, i, m, opts)
        .into_iter()
        .map(|c| Cycle {
            i,
            m,
            n: c.n,
            j: c.j,
            p: c.p,
            q: c.q,
            k,
        })
        .collect()
}

fn cycle_patches<'a>(
    v: &SequenceView<'a>,
    w: &SequenceView<'a>,
    c: &Cycle,
) -> Result<[&'a PatchRef; 4]> {
    let missing = |what: &str| {
        Error::validation(
            &v.video.video_id,
            format!("cycle {c:?} references a missing patch ({what})"),
        )
    };
    if c.n <= c.m || c.p > c.q {
        return Err(missing("frame order"));
    }
    Ok([
        v.patch(c.n, c.i).ok_or_else(|| missing("V^i_n"))?,
        w.patch(c.q, c.j).ok_or_else(|| missing("W^j_q"))?,
        w.patch(c.p, c.j).ok_or_else(|| missing("W^j_p"))?,
        v.patch(c.m, c.k).ok_or_else(|| missing("V^k_m"))?,
    ])
}

/// Score of one cycle, embedding its four jump endpoints directly.
pub fn cycle_score(v: &SequenceView, w: &SequenceView, c: &Cycle, embedder: &dyn Embed) -> Result<f64> {
    let [vn, wq, wp, vm] = cycle_patches(v, w, c)?;
    let out = cosine_sim(&embedder.embed(&vn.feature), &embedder.embed(&wq.feature));
    let back = cosine_sim(&embedder.embed(&wp.feature), &embedder.embed(&vm.feature));
    Ok(out + back)
}

/// Exponentially weighted average `sum_c x_c e^{x_c} / sum_c e^{x_c}`.
pub fn soft_max(x: &[f64]) -> Result<f64> {
    soft_max_with_weights(x).map(|(g, _)| g)
}

/// `Γ(x)` together with the softmax weights, computed with max subtraction.
pub fn soft_max_with_weights(x: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x.is_empty() {
        return Err(Error::Numerical("soft max of an empty score table".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("soft max of non-finite scores".into()));
    }
    let top = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = x.iter().map(|&v| (v - top).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    let g = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    // A weighted average never leaves the range of its inputs; rounding can push it out.
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((g.clamp(lo, top), w))
}

/// `dΓ/dx_c = w_c (1 + x_c - Γ)`.
pub fn soft_max_grad(x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (g, w) = soft_max_with_weights(x)?;
    let grad = x.iter().zip(&w).map(|(xc, wc)| wc * (1.0 + xc - g)).collect();
    Ok((g, grad))
}

/// First index attaining the maximum.
pub fn hard_max(x: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (ix, &v) in x.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((ix, v));
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaMode {
    /// Γ over all cycle scores; used in training.
    Soft,
    /// Exact maximum; used at inference.
    Hard,
}

/// Per-cycle scores with the cycles they belong to.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreTable {
    pub cycles: Vec<Cycle>,
    pub scores: Vec<f64>,
}

impl ScoreTable {
    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn soft_max(&self) -> Result<f64> {
        soft_max(&self.scores)
    }

    /// Best cycle; ties go to the lowest `(n, j, p, q)`.
    pub fn hard_max(&self) -> Option<(Cycle, f64)> {
        hard_max(&self.scores).map(|(ix, v)| (self.cycles[ix], v))
    }

    pub fn reduce(&self, mode: KappaMode) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        match mode {
            KappaMode::Soft => self.soft_max().ok(),
            KappaMode::Hard => self.hard_max().map(|(_, v)| v),
        }
    }
}

/// Cosine similarity between every slot of V and every slot of W, computed once per pair
/// so cycle scores become two table lookups.
pub struct PairSimilarity<'v, 'a> {
    pub v: &'v SequenceView<'a>,
    pub w: &'v SequenceView<'a>,
    sim: Vec<f64>,
}

impl<'v, 'a> PairSimilarity<'v, 'a> {
    /// `v_emb` and `w_emb` hold one embedding per slot, as from [`SequenceView::embed_slots`].
    pub fn new(v: &'v SequenceView<'a>, v_emb: &[Vec<f64>], w: &'v SequenceView<'a>, w_emb: &[Vec<f64>]) -> Self {
        let mut sim = Vec::with_capacity(v_emb.len() * w_emb.len());
        for a in v_emb {
            for b in w_emb {
                sim.push(cosine_sim(a, b));
            }
        }
        PairSimilarity { v, w, sim }
    }

    pub fn from_embedder(v: &'v SequenceView<'a>, w: &'v SequenceView<'a>, embedder: &dyn Embed) -> Self {
        Self::new(v, &v.embed_slots(embedder), w, &w.embed_slots(embedder))
    }

    /// Similarity between `V(pos, track)` and `W(pos, track)`; `None` if either is absent.
    pub fn get(&self, v_at: (usize, usize), w_at: (usize, usize)) -> Option<f64> {
        let a = self.v.slot(v_at.0, v_at.1)?;
        let b = self.w.slot(w_at.0, w_at.1)?;
        Some(self.sim[a * self.w.num_slots() + b])
    }

    pub fn cycle_score(&self, c: &Cycle) -> Option<f64> {
        Some(self.get((c.n, c.i), (c.q, c.j))? + self.get((c.m, c.k), (c.p, c.j))?)
    }

    pub fn score_table(&self, i: usize, k: usize, m: usize, opts: CycleOptions) -> ScoreTable {
        let cycles = enumerate_cycles(self.v, self.w, i, k, m, opts);
        let scores = cycles
            .iter()
            .map(|c| self.cycle_score(c).expect("enumerated cycles are feasible"))
            .collect();
        ScoreTable { cycles, scores }
    }

    /// Best-cycle score from `V^i_m` to `V^k_m`, or `None` when no cycle is feasible.
    pub fn kappa(&self, i: usize, k: usize, m: usize, mode: KappaMode, opts: CycleOptions) -> Option<f64> {
        self.score_table(i, k, m, opts).reduce(mode)
    }
}

/// Convenience form of [`PairSimilarity::kappa`] that embeds the two sequences first.
pub fn kappa(
    v: &SequenceView,
    w: &SequenceView,
    i: usize,
    k: usize,
    m: usize,
    embedder: &dyn Embed,
    mode: KappaMode,
    opts: CycleOptions,
) -> Option<f64> {
    PairSimilarity::from_embedder(v, w, embedder).kappa(i, k, m, mode, opts)
}
