//! The learnable embedding head: `W2 · relu(W1 · x + b1) + b2`, its hand-derived
//! backward pass, cosine similarity, and a finite-difference gradient checker.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything that maps a raw patch feature to an embedding vector.
pub trait Embed: Sync {
    fn embed(&self, feature: &[f32]) -> Vec<f64>;
}

/// Identity embedding over the raw backbone features.
#[derive(Clone, Copy, Debug, Default)]
pub struct RawFeatures;

impl Embed for RawFeatures {
    fn embed(&self, feature: &[f32]) -> Vec<f64> {
        feature.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Parameters of the two-layer head. Matrices are row-major: `w1` is `hidden x input`,
/// `w2` is `output x hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedParams {
    pub dims: HeadDims,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Intermediates of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

/// Gradient accumulators, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    w.chunks_exact(cols)
        .zip(b)
        .map(|(row, bias)| bias + dot(row, x))
        .collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl EmbedParams {
    pub fn zeros(dims: HeadDims) -> Self {
        EmbedParams {
            dims,
            w1: vec![0.0; dims.hidden * dims.input],
            b1: vec![0.0; dims.hidden],
            w2: vec![0.0; dims.output * dims.hidden],
            b2: vec![0.0; dims.output],
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization of every tensor.
    pub fn init<R: Rng + ?Sized>(dims: HeadDims, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims);
        let a1 = 1.0 / (dims.input as f64).sqrt();
        let a2 = 1.0 / (dims.hidden as f64).sqrt();
        p.w1.iter_mut().for_each(|v| *v = rng.random_range(-a1..=a1));
        p.b1.iter_mut().for_each(|v| *v = rng.random_range(-a1..=a1));
        p.w2.iter_mut().for_each(|v| *v = rng.random_range(-a2..=a2));
        p.b2.iter_mut().for_each(|v| *v = rng.random_range(-a2..=a2));
        p
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let expect = [
            (self.w1.len(), d.hidden * d.input),
            (self.b1.len(), d.hidden),
            (self.w2.len(), d.output * d.hidden),
            (self.b2.len(), d.output),
        ];
        for (got, expected) in expect {
            if got != expected {
                return Err(Error::Dimension { expected, got });
            }
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat coordinate access across `w1, b1, w2, b2` in that order.
    pub fn coord_mut(&mut self, mut ix: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if ix < t.len() {
                return &mut t[ix];
            }
            ix -= t.len();
        }
        panic!("parameter coordinate out of range");
    }

    pub fn forward(&self, feature: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if feature.len() != self.dims.input {
            return Err(Error::Dimension {
                expected: self.dims.input,
                got: feature.len(),
            });
        }
        let pre = affine(&self.w1, &self.b1, feature);
        let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let output = affine(&self.w2, &self.b2, &hidden);
        let cache = ForwardCache {
            input: feature.to_vec(),
            pre_activation: pre,
            hidden,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Forward pass without keeping intermediates.
    pub fn embed_f64(&self, feature: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = affine(&self.w1, &self.b1, feature)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        affine(&self.w2, &self.b2, &hidden)
    }

    /// Accumulates `d(output)/d(params)^T · upstream` into `grads`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64], grads: &mut GradBuffer) -> Result<()> {
        let d = self.dims;
        if upstream.len() != d.output {
            return Err(Error::Dimension {
                expected: d.output,
                got: upstream.len(),
            });
        }
        if cache.hidden.len() != d.hidden || cache.input.len() != d.input {
            return Err(Error::Dimension {
                expected: d.hidden,
                got: cache.hidden.len(),
            });
        }
        let mut d_hidden = vec![0.0; d.hidden];
        for (o, &u) in upstream.iter().enumerate() {
            if u == 0.0 {
                continue;
            }
            grads.b2[o] += u;
            let row = o * d.hidden;
            let g_row = &mut grads.w2[row..row + d.hidden];
            let w_row = &self.w2[row..row + d.hidden];
            for h in 0..d.hidden {
                g_row[h] += u * cache.hidden[h];
                d_hidden[h] += u * w_row[h];
            }
        }
        for h in 0..d.hidden {
            if cache.pre_activation[h] <= 0.0 || d_hidden[h] == 0.0 {
                continue;
            }
            let g = d_hidden[h];
            grads.b1[h] += g;
            let row = h * d.input;
            for (gw, x) in grads.w1[row..row + d.input].iter_mut().zip(&cache.input) {
                *gw += g * x;
            }
        }
        Ok(())
    }
}

impl Embed for EmbedParams {
    fn embed(&self, feature: &[f32]) -> Vec<f64> {
        let x: Vec<f64> = feature.iter().map(|&v| v as f64).collect();
        self.embed_f64(&x)
    }
}

impl GradBuffer {
    pub fn zeros_like(params: &EmbedParams) -> Self {
        GradBuffer {
            w1: vec![0.0; params.w1.len()],
            b1: vec![0.0; params.b1.len()],
            w2: vec![0.0; params.w2.len()],
            b2: vec![0.0; params.b2.len()],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn coord(&self, mut ix: usize) -> f64 {
        for t in self.tensors() {
            if ix < t.len() {
                return t[ix];
            }
            ix -= t.len();
        }
        panic!("gradient coordinate out of range");
    }

    pub fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

/// Cosine similarity plus a flag raised when either input has zero norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_sim_checked(a: &[f64], b: &[f64]) -> Cosine {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

/// Cosine similarity, clamped to `[-1, 1]`; zero when either vector is zero.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    cosine_sim_checked(a, b).value
}

/// Accumulates `upstream * ds/da` into `grad_a` and `upstream * ds/db` into `grad_b`.
///
/// `ds/da = b/(|a||b|) - s·a/|a|^2`. Zero-norm inputs contribute nothing.
pub fn cosine_backward(a: &[f64], b: &[f64], upstream: f64, grad_a: &mut [f64], grad_b: &mut [f64]) {
    let na2 = dot(a, a);
    let nb2 = dot(b, b);
    if na2 == 0.0 || nb2 == 0.0 || upstream == 0.0 {
        return;
    }
    let inv = 1.0 / (na2.sqrt() * nb2.sqrt());
    let s = dot(a, b) * inv;
    let ca = s / na2;
    let cb = s / nb2;
    for k in 0..a.len() {
        grad_a[k] += upstream * (b[k] * inv - ca * a[k]);
        grad_b[k] += upstream * (a[k] * inv - cb * b[k]);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Flat coordinate with the largest error.
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Relative-error denominator floor: coordinates whose analytic and numeric derivatives
/// are both below this magnitude are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `loss` on `num_coords` random
/// parameter coordinates (all of them when the head is smaller).
pub fn finite_diff_check<L, R>(
    params: &EmbedParams,
    loss: L,
    analytic: &GradBuffer,
    num_coords: usize,
    step: f64,
    rng: &mut R,
) -> GradCheckReport
where
    L: Fn(&EmbedParams) -> f64,
    R: Rng + ?Sized,
{
    let total = params.num_params();
    let coords: Vec<usize> = if num_coords >= total {
        (0..total).collect()
    } else {
        let mut c = sample(rng, total, num_coords).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: coords.len(),
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &c in &coords {
        let orig = *probe.coord_mut(c);
        *probe.coord_mut(c) = orig + step;
        let up = loss(&probe);
        *probe.coord_mut(c) = orig - step;
        let down = loss(&probe);
        *probe.coord_mut(c) = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.coord(c);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if err > report.max_rel_error || report.max_rel_error.is_nan() {
            report.max_rel_error = err;
            report.worst_coord = c;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &EmbedParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * params.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in [params.dims.input, params.dims.hidden, params.dims.output] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<EmbedParams> {
    if bytes.len() < 20 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {}", word(4))));
    }
    let dims = HeadDims {
        input: word(8) as usize,
        hidden: word(12) as usize,
        output: word(16) as usize,
    };
    let mut params = EmbedParams::zeros(dims);
    let expected = 20 + 8 * params.num_params();
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("checkpoint has {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let mut values = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().unwrap();
        }
    }
    params
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(params)
}

pub fn save_checkpoint(params: &EmbedParams, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EmbedParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(input: usize, hidden: usize, output: usize) -> HeadDims {
        HeadDims { input, hidden, output }
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_head_gives_zero_embedding() {
        let p = EmbedParams::zeros(dims(3, 4, 2));
        let (out, _) = p.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_head_passes_non_negative_input() {
        let mut p = EmbedParams::zeros(dims(3, 3, 3));
        for i in 0..3 {
            p.w1[i * 3 + i] = 1.0;
            p.w2[i * 3 + i] = 1.0;
        }
        let v = [0.5, 0.0, 2.25];
        assert_eq!(p.forward(&v).unwrap().0, v.to_vec());
    }

    #[test]
    fn forward_matches_straight_line_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = EmbedParams::init(dims(4, 3, 2), &mut rng);
        let x = random_vec(&mut rng, 4);
        let (out, cache) = p.forward(&x).unwrap();
        for o in 0..2 {
            let mut acc = p.b2[o];
            for h in 0..3 {
                let mut pre = p.b1[h];
                for d in 0..4 {
                    pre += p.w1[h * 4 + d] * x[d];
                }
                acc += p.w2[o * 3 + h] * if pre > 0.0 { pre } else { 0.0 };
            }
            assert!((acc - out[o]).abs() < 1e-14);
        }
        assert_eq!(cache.output, out);
        assert_eq!(p.embed_f64(&x), out);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = EmbedParams::zeros(dims(4, 3, 2));
        assert!(matches!(p.forward(&[1.0; 5]), Err(Error::Dimension { expected: 4, got: 5 })));
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 4.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_sim(&v, &v) - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&v, &neg) + 1.0).abs() < 1e-15);
        assert!((cosine_sim(&[1.0, 0.0], &[1.0, 1.0]) - 0.5f64.sqrt()).abs() < 1e-15);
        let z = cosine_sim_checked(&[0.0, 0.0], &[1.0, 1.0]);
        assert_eq!(z, Cosine { value: 0.0, degenerate: true });
    }

    #[test]
    fn cosine_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let a = random_vec(&mut rng, 7);
            let b = random_vec(&mut rng, 7);
            let alpha = rng.random_range(1e-3..1e3);
            let scaled: Vec<f64> = a.iter().map(|x| alpha * x).collect();
            assert!((cosine_sim(&scaled, &b) - cosine_sim(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_vec(&mut rng, 5);
        let b = random_vec(&mut rng, 5);
        let mut ga = vec![0.0; 5];
        let mut gb = vec![0.0; 5];
        cosine_backward(&a, &b, 1.0, &mut ga, &mut gb);
        let h = 1e-6;
        for k in 0..5 {
            let mut ap = a.clone();
            ap[k] += h;
            let mut am = a.clone();
            am[k] -= h;
            let num = (cosine_sim(&ap, &b) - cosine_sim(&am, &b)) / (2.0 * h);
            assert!((num - ga[k]).abs() < 1e-8);
            let mut bp = b.clone();
            bp[k] += h;
            let mut bm = b.clone();
            bm[k] -= h;
            let num = (cosine_sim(&a, &bp) - cosine_sim(&a, &bm)) / (2.0 * h);
            assert!((num - gb[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_upstream_leaves_grads_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EmbedParams::init(dims(4, 3, 2), &mut rng);
        let (_, cache) = p.forward(&random_vec(&mut rng, 4)).unwrap();
        let mut g = GradBuffer::zeros_like(&p);
        g.w1[0] = 0.25;
        let before = g.clone();
        p.backward(&cache, &[0.0, 0.0], &mut g).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn second_layer_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EmbedParams::init(dims(4, 3, 2), &mut rng);
        let (_, cache) = p.forward(&random_vec(&mut rng, 4)).unwrap();
        let u = [0.7, -1.3];
        let mut g = GradBuffer::zeros_like(&p);
        p.backward(&cache, &u, &mut g).unwrap();
        for o in 0..2 {
            for h in 0..3 {
                assert_eq!(g.w2[o * 3 + h], u[o] * cache.hidden[h]);
            }
            assert_eq!(g.b2[o], u[o]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = EmbedParams::init(dims(5, 6, 4), &mut rng);
        let x = random_vec(&mut rng, 5);
        let u = random_vec(&mut rng, 4);
        let (_, cache) = p.forward(&x).unwrap();
        let mut g = GradBuffer::zeros_like(&p);
        p.backward(&cache, &u, &mut g).unwrap();
        let loss = |q: &EmbedParams| dot(&q.embed_f64(&x), &u);
        let report = finite_diff_check(&p, loss, &g, usize::MAX, 1e-5, &mut rng);
        assert_eq!(report.coords_checked, p.num_params());
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = EmbedParams::init(dims(3, 5, 2), &mut rng);
        let bytes = encode_checkpoint(&p);
        let path = Path::new("mem.ck");
        assert_eq!(decode_checkpoint(&bytes, path).unwrap(), p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 8], path).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, path).is_err());
    }

    #[test]
    fn init_is_bounded_and_deterministic() {
        let d = dims(16, 8, 4);
        let a = EmbedParams::init(d, &mut ChaCha8Rng::seed_from_u64(9));
        let b = EmbedParams::init(d, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.w1.iter().all(|v| v.abs() <= 0.25));
        assert!(a.w2.iter().all(|v| v.abs() <= 1.0 / 8f64.sqrt()));
    }
}
