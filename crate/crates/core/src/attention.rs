//! Multi-head causal attention in two modes.
//!
//! `Sa` is standard scaled dot-product attention. `Xsa` (exclusive self
//! attention) adds one step per head before the output projection: the
//! component of each output `y_i` along the position's own value vector
//! `v_i` is removed,
//!
//! ```text
//! z_i = y_i - (y_i . n_i) n_i,    n_i = v_i / max(|v_i|, eps)
//! ```
//!
//! so `z_i` carries only information orthogonal to `v_i`.
//!
//! Scores are scaled by `1/sqrt(d_head)`. The unscaled form `exp(q.k)` is
//! the textbook definition; the scaled form is what production attention
//! kernels compute and what models are trained with, so it is used here.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Standard self attention.
    #[default]
    Sa,
    /// Exclusive self attention.
    Xsa,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Sa => "sa",
            AttentionMode::Xsa => "xsa",
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sa" => Ok(AttentionMode::Sa),
            "xsa" => Ok(AttentionMode::Xsa),
            other => Err(Error::config(format!("unknown attention mode `{other}` (sa|xsa)"))),
        }
    }
}

pub const DEFAULT_ROPE_THETA: f64 = 10_000.0;
pub const DEFAULT_REJECTION_EPS: f64 = 1e-12;

/// Hyperparameters of one attention layer. `n_heads * d_head` need not equal
/// `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub mode: AttentionMode,
    pub rope_theta: f64,
    /// Number of leading sequence positions that are learned sinks. Attention
    /// treats them as ordinary prefix positions; trace consumers skip them.
    pub n_sinks: usize,
    pub rejection_eps: f64,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, d_head: usize, mode: AttentionMode) -> Self {
        AttentionConfig {
            d_model,
            n_heads,
            d_head,
            mode,
            rope_theta: DEFAULT_ROPE_THETA,
            n_sinks: 0,
            rejection_eps: DEFAULT_REJECTION_EPS,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_head == 0 {
            return Err(Error::config("d_model, n_heads and d_head must be positive"));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::config(format!(
                "d_head must be even for rotary embeddings, got {}",
                self.d_head
            )));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::config("rope_theta must be positive"));
        }
        if !(self.rejection_eps > 0.0) {
            return Err(Error::config("rejection_eps must be positive"));
        }
        Ok(())
    }
}

/// Projection matrices, stored input-major: `x W` maps `[.., d_model]` to
/// `[.., n_heads * d_head]`.
#[derive(Debug, Clone)]
pub struct AttentionWeights<S: Float> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
}

impl<S: Float> AttentionWeights<S> {
    /// Gaussian initialization; `out_std` is used for `w_o`.
    pub fn init<R: Rng + ?Sized>(cfg: &AttentionConfig, std: f64, out_std: f64, rng: &mut R) -> Self {
        let (d, inner) = (cfg.d_model, cfg.inner_dim());
        AttentionWeights {
            w_q: Tensor::randn(&[d, inner], std, rng).requiring_grad(),
            w_k: Tensor::randn(&[d, inner], std, rng).requiring_grad(),
            w_v: Tensor::randn(&[d, inner], std, rng).requiring_grad(),
            w_o: Tensor::randn(&[inner, d], out_std, rng).requiring_grad(),
        }
    }

    pub fn validate(&self, cfg: &AttentionConfig) -> Result<()> {
        let (d, inner) = (cfg.d_model, cfg.inner_dim());
        self.w_q.expect_shape(&[d, inner], "w_q")?;
        self.w_k.expect_shape(&[d, inner], "w_k")?;
        self.w_v.expect_shape(&[d, inner], "w_v")?;
        self.w_o.expect_shape(&[inner, d], "w_o")
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<S>); 4] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<S>); 4] {
        [
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
        ]
    }
}

/// What to keep from a forward pass for later inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceCapture {
    #[default]
    Off,
    /// Values, head outputs and the attention diagonal.
    Diag,
    /// Everything in `Diag` plus full attention rows (`T^2` per head).
    Full,
}

impl FromStr for TraceCapture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(TraceCapture::Off),
            "diag" => Ok(TraceCapture::Diag),
            "full" => Ok(TraceCapture::Full),
            other => Err(Error::config(format!("unknown capture `{other}` (diag|full)"))),
        }
    }
}

/// Per-head quantities of one attention call; every tensor is
/// `[batch, n_heads, T, ..]` and detached from any tape.
#[derive(Debug, Clone)]
pub struct AttentionTrace<S: Float> {
    pub values: Tensor<S>,
    /// Head outputs before rejection (`y`).
    pub outputs: Tensor<S>,
    /// Head outputs after rejection (`z`); `None` in SA mode.
    pub rejected: Option<Tensor<S>>,
    /// `a_{i,i}`, shape `[batch, n_heads, T]`.
    pub diag: Tensor<S>,
    /// Full attention matrix when captured with [`TraceCapture::Full`].
    pub rows: Option<Tensor<S>>,
    pub n_sinks: usize,
}

impl<S: Float> AttentionTrace<S> {
    /// The tensor that feeds the output projection (`z` for XSA, else `y`).
    pub fn layer_outputs(&self) -> &Tensor<S> {
        self.rejected.as_ref().unwrap_or(&self.outputs)
    }
}

/// Cosine / sine tables for rotary embeddings of `d_head` channels.
#[derive(Debug, Clone)]
pub struct RopeTable {
    len: usize,
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    /// Pair `(2m, 2m+1)` at position `p` is rotated by
    /// `p * theta^(-2m / d_head)`. Positions may be fractional.
    pub fn new(positions: &[f64], d_head: usize, theta: f64) -> Result<Self> {
        if d_head % 2 != 0 || d_head == 0 {
            return Err(Error::config(format!("rotary embeddings need an even d_head, got {d_head}")));
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for m in 0..half {
                let freq = theta.powf(-2.0 * m as f64 / d_head as f64);
                let (s, c) = (p * freq).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Ok(RopeTable {
            len: positions.len(),
            half,
            cos,
            sin,
        })
    }

    pub fn for_positions(positions: &[usize], d_head: usize, theta: f64) -> Result<Self> {
        let p: Vec<f64> = positions.iter().map(|&x| x as f64).collect();
        Self::new(&p, d_head, theta)
    }

    /// Rotates `x` of shape `[..., T, d_head]` with `T` equal to the table length.
    pub fn apply<S: Float>(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let nd = x.ndim();
        if nd < 2 || x.shape()[nd - 1] != 2 * self.half || x.shape()[nd - 2] != self.len {
            return Err(Error::shape(format!(
                "rope table for T={} d_head={} cannot rotate shape {:?}",
                self.len,
                2 * self.half,
                x.shape()
            )));
        }
        let cos: Arc<Vec<S>> = Arc::new(self.cos.iter().map(|&c| S::of(c)).collect());
        let sin: Arc<Vec<S>> = Arc::new(self.sin.iter().map(|&s| S::of(s)).collect());
        let (t_len, half) = (self.len, self.half);
        let out = rotate(x.data(), &cos, &sin, t_len, half, false);
        Ok(Tensor::from_op(
            x.shape().to_vec(),
            out,
            "rope",
            vec![x.clone()],
            Box::new(move |g: &[S], _: &[Tensor<S>]| {
                vec![Some(rotate(g, &cos, &sin, t_len, half, true))]
            }),
        ))
    }
}

fn rotate<S: Float>(x: &[S], cos: &[S], sin: &[S], t_len: usize, half: usize, inverse: bool) -> Vec<S> {
    let d = 2 * half;
    let mut out = Vec::with_capacity(x.len());
    for (r, row) in x.chunks(d).enumerate() {
        let t = r % t_len;
        let (c, s) = (&cos[t * half..(t + 1) * half], &sin[t * half..(t + 1) * half]);
        for m in 0..half {
            let (a, b) = (row[2 * m], row[2 * m + 1]);
            let sn = if inverse { -s[m] } else { s[m] };
            out.push(a * c[m] - b * sn);
            out.push(a * sn + b * c[m]);
        }
    }
    out
}

/// Rotary position embedding of `x: [..., T, d_head]` at integer positions.
pub fn rope_apply<S: Float>(x: &Tensor<S>, positions: &[usize], theta: f64) -> Result<Tensor<S>> {
    let d_head = x.shape().last().copied().unwrap_or(0);
    RopeTable::for_positions(positions, d_head, theta)?.apply(x)
}

/// Removes from each `y` row its projection on the matching `v` row:
/// `z = y - (y . n) n` with `n = v / max(|v|, eps)`. Shapes must match; the
/// last dimension is the vector dimension. Differentiable in both inputs.
pub fn xsa_reject<S: Float>(y: &Tensor<S>, v: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    if y.shape() != v.shape() {
        return Err(Error::shape(format!(
            "xsa_reject: y {:?} and v {:?} differ",
            y.shape(),
            v.shape()
        )));
    }
    let d = y.shape().last().copied().unwrap_or(1).max(1);
    let eps = S::of(eps);
    let rows = y.numel() / d;
    let mut z = Vec::with_capacity(y.numel());
    // Per row: the clamped norm and the projection coefficient y . n.
    let mut radius = Vec::with_capacity(rows);
    let mut coef = Vec::with_capacity(rows);
    for (yr, vr) in y.data().chunks(d).zip(v.data().chunks(d)) {
        let r = vr.iter().map(|&x| x * x).sum::<S>().sqrt().max(eps);
        let inv = S::one() / r;
        let c = yr.iter().zip(vr).map(|(&a, &b)| a * b).sum::<S>() * inv;
        z.extend(yr.iter().zip(vr).map(|(&a, &b)| a - c * b * inv));
        radius.push(r);
        coef.push(c);
    }
    Ok(Tensor::from_op(
        y.shape().to_vec(),
        z,
        "xsa_reject",
        vec![y.clone(), v.clone()],
        Box::new(move |g: &[S], inputs: &[Tensor<S>]| {
            let (yd, vd) = (inputs[0].data(), inputs[1].data());
            let need_y = inputs[0].requires_grad();
            let need_v = inputs[1].requires_grad();
            let mut dy = Vec::with_capacity(if need_y { yd.len() } else { 0 });
            let mut dv = Vec::with_capacity(if need_v { vd.len() } else { 0 });
            let mut dn = vec![S::zero(); d];
            for (row, ((gr, yr), vr)) in g.chunks(d).zip(yd.chunks(d)).zip(vd.chunks(d)).enumerate() {
                let (r, c) = (radius[row], coef[row]);
                let inv = S::one() / r;
                let gn = gr.iter().zip(vr).map(|(&a, &b)| a * b).sum::<S>() * inv;
                if need_y {
                    dy.extend(gr.iter().zip(vr).map(|(&a, &b)| a - gn * b * inv));
                }
                if need_v {
                    // dL/dn = -(c g + (g . n) y)
                    for j in 0..d {
                        dn[j] = -(c * gr[j] + gn * yr[j]);
                    }
                    let clamped = r == eps && vr.iter().map(|&x| x * x).sum::<S>().sqrt() <= eps;
                    if clamped {
                        dv.extend(dn.iter().map(|&x| x * inv));
                    } else {
                        let dnn = dn.iter().zip(vr).map(|(&a, &b)| a * b).sum::<S>() * inv;
                        dv.extend(dn.iter().zip(vr).map(|(&a, &b)| (a - dnn * b * inv) * inv));
                    }
                }
            }
            vec![need_y.then_some(dy), need_v.then_some(dv)]
        }),
    ))
}

/// Per-head tensors of one attention call.
struct Heads<S: Float> {
    /// `[B, H, T, d_head]`
    values: Tensor<S>,
    outputs: Tensor<S>,
    probs: Option<Tensor<S>>,
}

/// Splits `[B, T, H*dh]` into `[B, H, T, dh]`.
fn split_heads<S: Float>(x: &Tensor<S>, b: usize, t: usize, cfg: &AttentionConfig) -> Result<Tensor<S>> {
    x.reshape(&[b, t, cfg.n_heads, cfg.d_head])?.transpose(1, 2)
}

fn merge_heads<S: Float>(x: &Tensor<S>, b: usize, t: usize, cfg: &AttentionConfig) -> Result<Tensor<S>> {
    x.transpose(1, 2)?.reshape(&[b, t, cfg.inner_dim()])
}

/// Views `[T, D]` as `[1, T, D]` and flattens extra leading dims into one
/// batch dimension. Returns the reshaped input and `(B, T)`.
fn as_batched<S: Float>(x: &Tensor<S>, d_model: usize) -> Result<(Tensor<S>, usize, usize)> {
    let nd = x.ndim();
    if nd < 2 || x.shape()[nd - 1] != d_model {
        return Err(Error::shape(format!(
            "attention input must be [.., T, {d_model}], got {:?}",
            x.shape()
        )));
    }
    let t = x.shape()[nd - 2];
    if t == 0 {
        return Err(Error::shape("attention over an empty sequence"));
    }
    let b = x.numel() / (t * d_model);
    Ok((x.reshape(&[b, t, d_model])?, b, t))
}

fn heads_forward<S: Float>(
    x: &Tensor<S>,
    w: &AttentionWeights<S>,
    cfg: &AttentionConfig,
    keep_probs: bool,
) -> Result<(Heads<S>, usize, usize)> {
    cfg.validate()?;
    w.validate(cfg)?;
    let (x, b, t) = as_batched(x, cfg.d_model)?;
    let rope = RopeTable::for_positions(&(0..t).collect::<Vec<_>>(), cfg.d_head, cfg.rope_theta)?;
    let q = rope.apply(&split_heads(&x.matmul(&w.w_q)?, b, t, cfg)?)?;
    let k = rope.apply(&split_heads(&x.matmul(&w.w_k)?, b, t, cfg)?)?;
    let v = split_heads(&x.matmul(&w.w_v)?, b, t, cfg)?;
    let scale = S::of(1.0 / (cfg.d_head as f64).sqrt());
    let probs = q.matmul_t(&k)?.causal_softmax(scale)?;
    drop((q, k));
    let outputs = probs.matmul(&v)?;
    let probs = keep_probs.then_some(probs);
    Ok((
        Heads {
            values: v,
            outputs,
            probs,
        },
        b,
        t,
    ))
}

fn diagonal<S: Float>(probs: &Tensor<S>) -> Result<Tensor<S>> {
    let nd = probs.ndim();
    let t = probs.shape()[nd - 1];
    let data: Vec<S> = probs
        .data()
        .chunks(t * t)
        .flat_map(|m| (0..t).map(move |i| m[i * t + i]))
        .collect();
    Tensor::from_vec(data, &probs.shape()[..nd - 1])
}

fn make_trace<S: Float>(
    heads: &Heads<S>,
    rejected: Option<&Tensor<S>>,
    capture: TraceCapture,
    n_sinks: usize,
) -> Result<Option<AttentionTrace<S>>> {
    let Some(probs) = heads.probs.as_ref() else {
        return Ok(None);
    };
    Ok(Some(AttentionTrace {
        values: heads.values.detach(),
        outputs: heads.outputs.detach(),
        rejected: rejected.map(Tensor::detach),
        diag: diagonal(probs)?,
        rows: (capture == TraceCapture::Full).then(|| probs.detach()),
        n_sinks,
    }))
}

/// Standard causal attention without the output projection: returns the
/// concatenated head outputs `[.., T, n_heads * d_head]` (before any
/// rejection) and, if requested, a trace.
pub fn sa_forward<S: Float>(
    x: &Tensor<S>,
    w: &AttentionWeights<S>,
    cfg: &AttentionConfig,
    capture: TraceCapture,
) -> Result<(Tensor<S>, Option<AttentionTrace<S>>)> {
    let (heads, b, t) = heads_forward(x, w, cfg, capture != TraceCapture::Off)?;
    let trace = make_trace(&heads, None, capture, cfg.n_sinks)?;
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().expect("rank checked") = cfg.inner_dim();
    let y = merge_heads(&heads.outputs, b, t, cfg)?.reshape(&out_shape)?;
    Ok((y, trace))
}

/// Full attention sublayer: `[.., T, d_model] -> [.., T, d_model]`.
pub fn attend<S: Float>(x: &Tensor<S>, w: &AttentionWeights<S>, cfg: &AttentionConfig) -> Result<Tensor<S>> {
    attend_traced(x, w, cfg, TraceCapture::Off).map(|(y, _)| y)
}

/// [`attend`] that can also return the per-head trace.
pub fn attend_traced<S: Float>(
    x: &Tensor<S>,
    w: &AttentionWeights<S>,
    cfg: &AttentionConfig,
    capture: TraceCapture,
) -> Result<(Tensor<S>, Option<AttentionTrace<S>>)> {
    let (heads, b, t) = heads_forward(x, w, cfg, capture != TraceCapture::Off)?;
    let (mixed, trace) = match cfg.mode {
        AttentionMode::Sa => {
            let trace = make_trace(&heads, None, capture, cfg.n_sinks)?;
            (merge_heads(&heads.outputs, b, t, cfg)?, trace)
        }
        AttentionMode::Xsa => {
            let z = xsa_reject(&heads.outputs, &heads.values, cfg.rejection_eps)?;
            let trace = make_trace(&heads, Some(&z), capture, cfg.n_sinks)?;
            (merge_heads(&z, b, t, cfg)?, trace)
        }
    };
    drop(heads);
    let out = mixed.matmul(&w.w_o)?.reshape(x.shape())?;
    Ok((out, trace))
}

/// Angle that rotates pair `m` at position `pos`; exposed for tests and docs.
pub fn rope_angle(pos: f64, m: usize, d_head: usize, theta: f64) -> f64 {
    pos * theta.powf(-2.0 * m as f64 / d_head as f64)
}

/// Quarter turn, handy for hand-checked rotations.
pub const QUARTER_TURN: f64 = PI / 2.0;
