//! Minimal dense regressor mapping a 32x32 image to the 9 entries of the
//! distribution parameter A, with hand-written backprop and Adam.
//!
//! Architecture: flatten(32x32) -> dense(256, tanh) -> dense(64, tanh) ->
//! dense(9, linear), output reshaped row-major to 3x3. Parameters live in one
//! flat f64 buffer; the layout is fixed by [`LAYERS`] and shared by gradients,
//! optimizer moments and the checkpoint format.

use crate::augment::Image;
use crate::fisher::FisherParams;
use nalgebra::Matrix3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const INPUT_DIM: usize = 32 * 32;
pub const HIDDEN1: usize = 256;
pub const HIDDEN2: usize = 64;
pub const OUTPUT_DIM: usize = 9;

/// (fan_in, fan_out) per dense layer.
pub const LAYERS: [(usize, usize); 3] = [
    (INPUT_DIM, HIDDEN1),
    (HIDDEN1, HIDDEN2),
    (HIDDEN2, OUTPUT_DIM),
];

/// Total parameter count (weights + biases).
pub const PARAM_COUNT: usize =
    INPUT_DIM * HIDDEN1 + HIDDEN1 + HIDDEN1 * HIDDEN2 + HIDDEN2 + HIDDEN2 * OUTPUT_DIM + OUTPUT_DIM;

const CHECKPOINT_MAGIC: &[u8; 8] = b"ROTREGN1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint layer dims mismatch")]
    DimsMismatch,
    #[error("checkpoint has trailing bytes")]
    TrailingBytes,
}

/// Offsets of (w, b) blocks for each layer inside the flat buffer.
fn layout() -> [(usize, usize); 3] {
    let mut off = 0;
    let mut out = [(0, 0); 3];
    for (i, (fi, fo)) in LAYERS.iter().enumerate() {
        out[i] = (off, off + fi * fo);
        off += fi * fo + fo;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    data: Vec<f64>,
}

impl NetParams {
    pub fn zeros() -> Self {
        NetParams { data: vec![0.0; PARAM_COUNT] }
    }

    /// Scaled-uniform fan-in init: w ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
    /// biases zero.
    pub fn init(rng: &mut ChaCha12Rng) -> Self {
        let mut data = vec![0.0; PARAM_COUNT];
        let lay = layout();
        for (i, (fi, fo)) in LAYERS.iter().enumerate() {
            let limit = (1.0 / *fi as f64).sqrt();
            let (w_off, b_off) = lay[i];
            for w in &mut data[w_off..w_off + fi * fo] {
                *w = rng.random_range(-limit..limit);
            }
            for b in &mut data[b_off..b_off + fo] {
                *b = 0.0;
            }
        }
        NetParams { data }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Content checksum, used by the teacher-purity assertions.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for x in &self.data {
            h ^= x.to_bits();
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), NetError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(LAYERS.len() as u32).to_le_bytes())?;
        for (fi, fo) in LAYERS {
            f.write_all(&(fi as u32).to_le_bytes())?;
            f.write_all(&(fo as u32).to_le_bytes())?;
        }
        for x in &self.data {
            f.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, NetError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NetError::BadMagic);
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(NetError::BadVersion(version));
        }
        f.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) as usize != LAYERS.len() {
            return Err(NetError::DimsMismatch);
        }
        for (fi, fo) in LAYERS {
            f.read_exact(&mut u32buf)?;
            if u32::from_le_bytes(u32buf) as usize != fi {
                return Err(NetError::DimsMismatch);
            }
            f.read_exact(&mut u32buf)?;
            if u32::from_le_bytes(u32buf) as usize != fo {
                return Err(NetError::DimsMismatch);
            }
        }
        let mut data = vec![0.0f64; PARAM_COUNT];
        let mut x = [0u8; 8];
        for d in &mut data {
            f.read_exact(&mut x)?;
            *d = f64::from_le_bytes(x);
        }
        if f.read(&mut x)? != 0 {
            return Err(NetError::TrailingBytes);
        }
        Ok(NetParams { data })
    }
}

impl NetGrads {
    pub fn zeros() -> Self {
        NetGrads { data: vec![0.0; PARAM_COUNT] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// grads += other, entrywise.
    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// grads += c * other.
    pub fn add_scaled(&mut self, other: &NetGrads, c: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Adam optimizer state. Moments are shape-congruent with the parameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(lr: f64) -> Self {
        OptimState {
            m: vec![0.0; PARAM_COUNT],
            v: vec![0.0; PARAM_COUNT],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step with bias correction. Elementwise, so the two halves run
/// in parallel without affecting the result.
pub fn adam_update(params: &mut NetParams, grads: &NetGrads, opt: &mut OptimState) {
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let (lr, b1, b2, eps) = (opt.lr, opt.beta1, opt.beta2, opt.eps);
    let kernel = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    };
    let mid = PARAM_COUNT / 2;
    let (p_lo, p_hi) = params.data.split_at_mut(mid);
    let (m_lo, m_hi) = opt.m.split_at_mut(mid);
    let (v_lo, v_hi) = opt.v.split_at_mut(mid);
    let (g_lo, g_hi) = grads.data.split_at(mid);
    #[cfg(feature = "parallel")]
    rayon::join(|| kernel(p_lo, m_lo, v_lo, g_lo), || kernel(p_hi, m_hi, v_hi, g_hi));
    #[cfg(not(feature = "parallel"))]
    {
        kernel(p_lo, m_lo, v_lo, g_lo);
        kernel(p_hi, m_hi, v_hi, g_hi);
    }
}

/// Dot product with four independent accumulators. The summation order is
/// fixed (deterministic) and the independent chains let the compiler keep
/// the FPU pipeline full.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n4 = a.len() & !3;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < n4 {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    for k in n4..a.len() {
        tail += a[k] * b[k];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// out[k] += c * a[k].
#[inline]
fn axpy(out: &mut [f64], a: &[f64], c: f64) {
    for (o, x) in out.iter_mut().zip(a) {
        *o += c * x;
    }
}

fn dense(w: &[f64], b: &[f64], input: &[f64], fan_in: usize, fan_out: usize, out: &mut [f64]) {
    for o in 0..fan_out {
        out[o] = b[o] + dot(&w[o * fan_in..(o + 1) * fan_in], input);
    }
}

struct ForwardTrace {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    out: [f64; OUTPUT_DIM],
}

fn forward_trace(p: &NetParams, img: &Image) -> ForwardTrace {
    let lay = layout();
    let x: Vec<f64> = img.pixels.iter().map(|&v| v as f64).collect();
    debug_assert_eq!(x.len(), INPUT_DIM);

    let mut h1 = vec![0.0; HIDDEN1];
    let (w0, b0) = lay[0];
    dense(&p.data[w0..b0], &p.data[b0..b0 + HIDDEN1], &x, INPUT_DIM, HIDDEN1, &mut h1);
    for v in &mut h1 {
        *v = v.tanh();
    }

    let mut h2 = vec![0.0; HIDDEN2];
    let (w1, b1) = lay[1];
    dense(&p.data[w1..b1], &p.data[b1..b1 + HIDDEN2], &h1, HIDDEN1, HIDDEN2, &mut h2);
    for v in &mut h2 {
        *v = v.tanh();
    }

    let mut out = [0.0; OUTPUT_DIM];
    let (w2, b2) = lay[2];
    dense(&p.data[w2..b2], &p.data[b2..b2 + OUTPUT_DIM], &h2, HIDDEN2, OUTPUT_DIM, &mut out);

    ForwardTrace { x, h1, h2, out }
}

/// Maps an image to the distribution parameter matrix (row-major output).
pub fn forward(p: &NetParams, img: &Image) -> Result<FisherParams, NetError> {
    let tr = forward_trace(p, img);
    for (layer, ok) in [
        (1, tr.h1.iter().all(|v| v.is_finite())),
        (2, tr.h2.iter().all(|v| v.is_finite())),
        (3, tr.out.iter().all(|v| v.is_finite())),
    ] {
        if !ok {
            return Err(NetError::NonFinite { layer });
        }
    }
    let o = &tr.out;
    Ok(FisherParams::new(Matrix3::new(
        o[0], o[1], o[2], o[3], o[4], o[5], o[6], o[7], o[8],
    )))
}

/// Exact gradients of a scalar loss with upstream dL/dA (3x3, row-major
/// correspondence with the output) with respect to every parameter.
pub fn backward(p: &NetParams, img: &Image, dl_da: &Matrix3<f64>) -> NetGrads {
    let mut g = NetGrads::zeros();
    backward_into(p, img, dl_da, &mut g);
    g
}

/// [`backward`] accumulating into an existing gradient buffer (g += dL/dp);
/// the batch loops use this to avoid a large allocation per sample.
pub fn backward_into(p: &NetParams, img: &Image, dl_da: &Matrix3<f64>, g: &mut NetGrads) {
    let lay = layout();
    let tr = forward_trace(p, img);

    let d_out: [f64; OUTPUT_DIM] = [
        dl_da[(0, 0)],
        dl_da[(0, 1)],
        dl_da[(0, 2)],
        dl_da[(1, 0)],
        dl_da[(1, 1)],
        dl_da[(1, 2)],
        dl_da[(2, 0)],
        dl_da[(2, 1)],
        dl_da[(2, 2)],
    ];

    // Output layer (linear).
    let (w2, b2) = lay[2];
    let mut d_h2 = vec![0.0; HIDDEN2];
    for o in 0..OUTPUT_DIM {
        axpy(&mut g.data[w2 + o * HIDDEN2..w2 + (o + 1) * HIDDEN2], &tr.h2, d_out[o]);
        g.data[b2 + o] += d_out[o];
        axpy(&mut d_h2, &p.data[w2 + o * HIDDEN2..w2 + (o + 1) * HIDDEN2], d_out[o]);
    }
    for (d, h) in d_h2.iter_mut().zip(&tr.h2) {
        *d *= 1.0 - h * h;
    }

    // Hidden layer 2.
    let (w1, b1) = lay[1];
    let mut d_h1 = vec![0.0; HIDDEN1];
    for o in 0..HIDDEN2 {
        axpy(&mut g.data[w1 + o * HIDDEN1..w1 + (o + 1) * HIDDEN1], &tr.h1, d_h2[o]);
        g.data[b1 + o] += d_h2[o];
        axpy(&mut d_h1, &p.data[w1 + o * HIDDEN1..w1 + (o + 1) * HIDDEN1], d_h2[o]);
    }
    for (d, h) in d_h1.iter_mut().zip(&tr.h1) {
        *d *= 1.0 - h * h;
    }

    // Input layer.
    let (w0, b0) = lay[0];
    for o in 0..HIDDEN1 {
        axpy(&mut g.data[w0 + o * INPUT_DIM..w0 + (o + 1) * INPUT_DIM], &tr.x, d_h1[o]);
        g.data[b0 + o] += d_h1[o];
    }
}

/// Loss flavors exercised end to end by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Nll,
    CrossEntropy,
}

/// Full-chain gradient check: central finite differences (h = 1e-4) over a
/// random 1% parameter subset against the analytic backward pass, through the
/// distribution loss. Returns the max relative error (0/0 guarded to 0).
pub fn grad_check(
    p: &NetParams,
    img: &Image,
    kind: LossKind,
    rng: &mut ChaCha12Rng,
) -> Result<f64, crate::fisher::FisherError> {
    use crate::fisher::{cross_entropy, nll_loss, FisherStats};
    use crate::so3::sample_uniform_rotation;

    let r_gt = sample_uniform_rotation(rng);
    let teacher = {
        let r = sample_uniform_rotation(rng);
        FisherParams::new(r.matrix() * 3.0)
    };

    let loss_of = |params: &NetParams| -> Result<f64, crate::fisher::FisherError> {
        let a = forward(params, img).expect("finite net output");
        Ok(match kind {
            LossKind::Nll => nll_loss(&a, &r_gt)?.0,
            LossKind::CrossEntropy => cross_entropy(&teacher, &a)?.0,
        })
    };

    let a = forward(p, img).expect("finite net output");
    let stats = FisherStats::compute(&a)?;
    let dl_da = match kind {
        LossKind::Nll => crate::fisher::nll_loss_with_stats(&a, &stats, &r_gt).1,
        LossKind::CrossEntropy => {
            let t_stats = FisherStats::compute(&teacher)?;
            crate::fisher::cross_entropy_with_stats(&t_stats.expected_rotation(), &a, &stats).1
        }
    };
    let analytic = backward(p, img, &dl_da);

    let n_checked = (PARAM_COUNT / 100).max(1);
    let mut indices: Vec<usize> =
        (0..n_checked).map(|_| rng.random_range(0..PARAM_COUNT)).collect();
    indices.sort_unstable();
    indices.dedup();

    let h = 1e-4;
    let errs = crate::parallel::map_slice(&indices, |_, &idx| {
        let mut pp = p.clone();
        pp.data[idx] = p.data[idx] + h;
        let lp = loss_of(&pp)?;
        pp.data[idx] = p.data[idx] - h;
        let lm = loss_of(&pp)?;
        let fd = (lp - lm) / (2.0 * h);
        let an = analytic.data[idx];
        let denom = an.abs().max(fd.abs());
        Ok::<f64, crate::fisher::FisherError>(if denom < 1e-10 {
            0.0
        } else {
            (an - fd).abs() / denom
        })
    });
    let mut max_err = 0.0f64;
    for e in errs {
        max_err = max_err.max(e?);
    }
    Ok(max_err)
}
