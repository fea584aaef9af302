//! Compact convolutional network in the EEGNet family.
//!
//! Layer stack for an input of `C` channels by `T` samples:
//!
//! ```text
//! temporal conv (F1 kernels, same padding)  -> BN1
//! depthwise spatial conv (D per kernel, spans all C, max-norm) -> BN2 -> ELU
//! average pool (pool1) -> dropout
//! separable conv: depthwise temporal (K2) + pointwise (F1·D -> F2) -> BN3 -> ELU
//! average pool (pool2) -> dropout -> dense (F2·T2 -> 4) -> softmax
//! ```
//!
//! The first three stages are linear per temporal kernel and commute, so
//! the forward pass mixes channels first and convolves `F1·D` series
//! instead of `F1·C`. BN1 needs statistics of the unmixed convolution
//! `k_f ⋆ x_c` over all channels; they are quadratic in `k_f`, so each
//! input carries the sufficient statistics `S` (length K1) and `G`
//! (K1 × K1) that give the mean and second moment for any kernel.

mod gradcheck;
mod train;

pub use gradcheck::{analytic_gradient, grad_check, GradCheckReport};
pub use train::{train, Hyperparams, PassRecord, TrainOutcome};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::domain::{Epoch, TextureClass, N_CLASSES};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.1;
pub const MAX_NORM: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnArch {
    pub n_channels: usize,
    pub n_samples: usize,
    pub f1: usize,
    pub depth_mult: usize,
    pub f2: usize,
    pub temporal_kernel: usize,
    pub separable_kernel: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout_p: f64,
    pub n_classes: usize,
}

impl Default for CnnArch {
    fn default() -> Self {
        Self {
            n_channels: 64,
            n_samples: 625,
            f1: 8,
            depth_mult: 2,
            f2: 16,
            temporal_kernel: 63,
            separable_kernel: 16,
            pool1: 4,
            pool2: 8,
            dropout_p: 0.25,
            n_classes: N_CLASSES,
        }
    }
}

impl CnnArch {
    /// Defaults sized for a given input; the temporal kernel spans half a
    /// second, rounded to the nearest odd length.
    pub fn for_input(n_channels: usize, n_samples: usize, fs: f64) -> Self {
        let half = (fs / 2.0).round().max(1.0) as usize;
        let k = if half % 2 == 1 { half } else { half + 1 };
        Self {
            n_channels,
            n_samples,
            temporal_kernel: k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_channels", self.n_channels),
            ("n_samples", self.n_samples),
            ("f1", self.f1),
            ("depth_mult", self.depth_mult),
            ("f2", self.f2),
            ("temporal_kernel", self.temporal_kernel),
            ("separable_kernel", self.separable_kernel),
            ("pool1", self.pool1),
            ("pool2", self.pool2),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("cnn.{name} must be positive")));
            }
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "cnn.temporal_kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("cnn.dropout_p must lie in [0, 1)".into()));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::Config(format!("cnn.n_classes is fixed at {N_CLASSES}")));
        }
        if self.t2() == 0 {
            return Err(Error::Config(format!(
                "{} samples vanish after pooling by {} and {}",
                self.n_samples, self.pool1, self.pool2
            )));
        }
        Ok(())
    }

    /// Depthwise output channels, `F1·D`.
    pub fn n_depth(&self) -> usize {
        self.f1 * self.depth_mult
    }

    pub fn t1(&self) -> usize {
        self.n_samples / self.pool1
    }

    pub fn t2(&self) -> usize {
        self.t1() / self.pool2
    }

    pub fn flat_dim(&self) -> usize {
        self.f2 * self.t2()
    }
}

/// Trainable parameters. Gradients and optimiser moments reuse the type.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnParams {
    /// `[F1][K1]`
    pub temporal: Vec<f64>,
    pub bn1_gamma: Vec<f64>,
    pub bn1_beta: Vec<f64>,
    /// `[F1·D][C]`, row `f·D + d`.
    pub spatial: Vec<f64>,
    pub bn2_gamma: Vec<f64>,
    pub bn2_beta: Vec<f64>,
    /// `[F1·D][K2]`
    pub sep_depth: Vec<f64>,
    /// `[F2][F1·D]`
    pub sep_point: Vec<f64>,
    pub bn3_gamma: Vec<f64>,
    pub bn3_beta: Vec<f64>,
    /// `[n_classes][F2·T2]`
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

pub const PARAM_GROUPS: [&str; 12] = [
    "temporal", "bn1_gamma", "bn1_beta", "spatial", "bn2_gamma", "bn2_beta", "sep_depth",
    "sep_point", "bn3_gamma", "bn3_beta", "dense_w", "dense_b",
];

impl CnnParams {
    pub fn zeros(arch: &CnnArch) -> Self {
        let o = arch.n_depth();
        Self {
            temporal: vec![0.0; arch.f1 * arch.temporal_kernel],
            bn1_gamma: vec![0.0; arch.f1],
            bn1_beta: vec![0.0; arch.f1],
            spatial: vec![0.0; o * arch.n_channels],
            bn2_gamma: vec![0.0; o],
            bn2_beta: vec![0.0; o],
            sep_depth: vec![0.0; o * arch.separable_kernel],
            sep_point: vec![0.0; arch.f2 * o],
            bn3_gamma: vec![0.0; arch.f2],
            bn3_beta: vec![0.0; arch.f2],
            dense_w: vec![0.0; arch.n_classes * arch.flat_dim()],
            dense_b: vec![0.0; arch.n_classes],
        }
    }

    pub fn groups(&self) -> [&[f64]; 12] {
        [
            &self.temporal,
            &self.bn1_gamma,
            &self.bn1_beta,
            &self.spatial,
            &self.bn2_gamma,
            &self.bn2_beta,
            &self.sep_depth,
            &self.sep_point,
            &self.bn3_gamma,
            &self.bn3_beta,
            &self.dense_w,
            &self.dense_b,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut Vec<f64>; 12] {
        [
            &mut self.temporal,
            &mut self.bn1_gamma,
            &mut self.bn1_beta,
            &mut self.spatial,
            &mut self.bn2_gamma,
            &mut self.bn2_beta,
            &mut self.sep_depth,
            &mut self.sep_point,
            &mut self.bn3_gamma,
            &mut self.bn3_beta,
            &mut self.dense_w,
            &mut self.dense_b,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn len(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Running batch-norm statistics used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    fn new(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            var: vec![1.0; n],
        }
    }

    fn update(&mut self, mean: &[f64], var: &[f64]) {
        for i in 0..self.mean.len() {
            self.mean[i] = (1.0 - BN_MOMENTUM) * self.mean[i] + BN_MOMENTUM * mean[i];
            self.var[i] = (1.0 - BN_MOMENTUM) * self.var[i] + BN_MOMENTUM * var[i];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    pub arch: CnnArch,
    pub params: CnnParams,
    pub bn1: BnRunning,
    pub bn2: BnRunning,
    pub bn3: BnRunning,
}

fn glorot(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize, fan_out: usize) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    for v in out.iter_mut() {
        *v = dist.sample(rng);
    }
}

impl CnnModel {
    /// Glorot-uniform weights, unit BN scales, zero shifts and biases.
    pub fn new(arch: CnnArch, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut p = CnnParams::zeros(&arch);
        let (k1, k2, c, o) = (arch.temporal_kernel, arch.separable_kernel, arch.n_channels, arch.n_depth());
        glorot(rng, &mut p.temporal, k1, k1 * arch.f1);
        glorot(rng, &mut p.spatial, c, c * arch.depth_mult);
        glorot(rng, &mut p.sep_depth, k2, k2);
        glorot(rng, &mut p.sep_point, o, arch.f2);
        glorot(rng, &mut p.dense_w, arch.flat_dim(), arch.n_classes);
        for g in [&mut p.bn1_gamma, &mut p.bn2_gamma, &mut p.bn3_gamma] {
            g.fill(1.0);
        }
        let mut model = Self {
            bn1: BnRunning::new(arch.f1),
            bn2: BnRunning::new(o),
            bn3: BnRunning::new(arch.f2),
            arch,
            params: p,
        };
        model.apply_max_norm();
        Ok(model)
    }

    /// Rescale each spatial filter to norm at most [`MAX_NORM`].
    pub fn apply_max_norm(&mut self) {
        let c = self.arch.n_channels;
        for row in self.params.spatial.chunks_mut(c) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > MAX_NORM {
                let s = MAX_NORM / norm;
                row.iter_mut().for_each(|v| *v *= s);
            }
        }
    }

    /// Class probabilities in eval mode.
    pub fn predict_proba(&self, inputs: &[&CnnInput]) -> Result<Vec<[f64; N_CLASSES]>> {
        let pass = forward(self, inputs, Mode::Eval, None)?;
        Ok(pass
            .cache
            .probs
            .chunks(N_CLASSES)
            .map(|p| [p[0], p[1], p[2], p[3]])
            .collect())
    }

    pub fn logits(&self, inputs: &[&CnnInput]) -> Result<Vec<[f64; N_CLASSES]>> {
        let pass = forward(self, inputs, Mode::Eval, None)?;
        Ok(pass
            .cache
            .logits
            .chunks(N_CLASSES)
            .map(|p| [p[0], p[1], p[2], p[3]])
            .collect())
    }

    pub fn predict(&self, inputs: &[&CnnInput]) -> Result<Vec<TextureClass>> {
        Ok(self
            .predict_proba(inputs)?
            .iter()
            .map(crate::ovr::argmax_class)
            .collect())
    }
}

/// One network input with its BN1 sufficient statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnInput {
    /// `[C][T]`, row-major.
    pub x: Vec<f64>,
    pub label: TextureClass,
    n_channels: usize,
    n_samples: usize,
    kernel: usize,
    /// `S[j] = Σ_c Σ_t x_c(t + j - h)` with zero padding.
    s: Vec<f64>,
    /// `G[j][l] = Σ_c Σ_t x_c(t + j - h) x_c(t + l - h)`.
    g: Vec<f64>,
}

impl CnnInput {
    pub fn new(epoch: &Epoch, temporal_kernel: usize) -> Result<Self> {
        if !epoch.is_finite() {
            return Err(Error::NonFinite(format!("epoch of trial {}", epoch.trial_id)));
        }
        let (c, t) = epoch.data.dim();
        let x: Vec<f64> = epoch.data.iter().copied().collect();
        Self::from_parts(x, c, t, epoch.label, temporal_kernel)
    }

    pub fn from_parts(
        x: Vec<f64>,
        n_channels: usize,
        n_samples: usize,
        label: TextureClass,
        kernel: usize,
    ) -> Result<Self> {
        if x.len() != n_channels * n_samples {
            return Err(Error::shape(
                format!("{n_channels}x{n_samples} values"),
                x.len(),
            ));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config("temporal kernel must be odd".into()));
        }
        let (s, g) = bn1_moments(&x, n_channels, n_samples, kernel);
        Ok(Self {
            x,
            label,
            n_channels,
            n_samples,
            kernel,
            s,
            g,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_channels, self.n_samples)
    }
}

/// Window sums and lag-product sums of all channels, via prefix sums.
fn bn1_moments(x: &[f64], c: usize, t: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (k - 1) / 2;
    // prefix[δ][n] = Σ_ch Σ_{t' < n, t'+δ < T} x(t') x(t'+δ)
    let mut prefix = vec![vec![0.0; t + 1]; k];
    let mut sum_prefix = vec![0.0; t + 1];
    let mut lag = vec![0.0; t];
    let mut chan_sum = vec![0.0; t];
    for ch in 0..c {
        let row = &x[ch * t..(ch + 1) * t];
        for (s, v) in chan_sum.iter_mut().zip(row) {
            *s += v;
        }
        for (delta, pre) in prefix.iter_mut().enumerate() {
            for (i, l) in lag.iter_mut().enumerate() {
                *l = if i + delta < t { row[i] * row[i + delta] } else { 0.0 };
            }
            let mut acc = 0.0;
            for i in 0..t {
                acc += lag[i];
                pre[i + 1] += acc;
            }
        }
    }
    let mut acc = 0.0;
    for i in 0..t {
        acc += chan_sum[i];
        sum_prefix[i + 1] = acc;
    }

    // Valid t' = t + j - h for t in [0, T): t' in [j - h, T - 1 + j - h].
    let range = |j: usize, delta: usize| -> Option<(usize, usize)> {
        let lo = j.saturating_sub(h);
        let hi_excl = (t + j).saturating_sub(h).min(t).min(t.saturating_sub(delta));
        (hi_excl > lo).then_some((lo, hi_excl))
    };
    let s: Vec<f64> = (0..k)
        .map(|j| range(j, 0).map_or(0.0, |(lo, hi)| sum_prefix[hi] - sum_prefix[lo]))
        .collect();
    let mut g = vec![0.0; k * k];
    for j in 0..k {
        for l in j..k {
            let delta = l - j;
            let v = range(j, delta).map_or(0.0, |(lo, hi)| prefix[delta][hi] - prefix[delta][lo]);
            g[j * k + l] = v;
            g[l * k + j] = v;
        }
    }
    (s, g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Mode {
    /// Batch statistics; dropout active when an RNG is supplied.
    Train,
    Eval,
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

/// Derivative of ELU expressed through its output.
fn elu_grad_from_output(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        y + 1.0
    }
}

struct BnOut {
    out: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Batch norm over layout `[B][ch][len]`, per channel.
fn bn_forward(
    x: &[f64],
    b: usize,
    ch: usize,
    len: usize,
    gamma: &[f64],
    beta: &[f64],
    mode: Mode,
    running: &BnRunning,
) -> BnOut {
    let n = (b * len) as f64;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; ch];
            let mut var = vec![0.0; ch];
            for bi in 0..b {
                for c in 0..ch {
                    let row = &x[(bi * ch + c) * len..][..len];
                    mean[c] += row.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            for bi in 0..b {
                for c in 0..ch {
                    let row = &x[(bi * ch + c) * len..][..len];
                    var[c] += row.iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        }
        Mode::Eval => (running.mean.clone(), running.var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for bi in 0..b {
        for c in 0..ch {
            let off = (bi * ch + c) * len;
            for i in off..off + len {
                xhat[i] = (x[i] - mean[c]) * inv_std[c];
                out[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    BnOut {
        out,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Returns `dx` and accumulates into `dgamma`, `dbeta`.
#[allow(clippy::too_many_arguments)]
fn bn_backward(
    g: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    b: usize,
    ch: usize,
    len: usize,
    mode: Mode,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let n = (b * len) as f64;
    let mut sum_g = vec![0.0; ch];
    let mut sum_gx = vec![0.0; ch];
    for bi in 0..b {
        for c in 0..ch {
            let off = (bi * ch + c) * len;
            for i in off..off + len {
                sum_g[c] += g[i];
                sum_gx[c] += g[i] * xhat[i];
            }
        }
    }
    for c in 0..ch {
        dgamma[c] += sum_gx[c];
        dbeta[c] += sum_g[c];
    }
    let mut dx = vec![0.0; g.len()];
    for bi in 0..b {
        for c in 0..ch {
            let off = (bi * ch + c) * len;
            let scale = gamma[c] * inv_std[c];
            for i in off..off + len {
                dx[i] = match mode {
                    Mode::Train => scale * (g[i] - sum_g[c] / n - xhat[i] * sum_gx[c] / n),
                    Mode::Eval => scale * g[i],
                };
            }
        }
    }
    dx
}

/// Average pool with window `p` over `[rows][len_in]`, dropping the tail.
fn avg_pool(x: &[f64], rows: usize, len_in: usize, p: usize) -> Vec<f64> {
    let len_out = len_in / p;
    let mut out = vec![0.0; rows * len_out];
    for r in 0..rows {
        for t in 0..len_out {
            let w = &x[r * len_in + t * p..][..p];
            out[r * len_out + t] = w.iter().sum::<f64>() / p as f64;
        }
    }
    out
}

fn avg_pool_backward(g: &[f64], rows: usize, len_in: usize, p: usize) -> Vec<f64> {
    let len_out = len_in / p;
    let mut dx = vec![0.0; rows * len_in];
    for r in 0..rows {
        for t in 0..len_out {
            let v = g[r * len_out + t] / p as f64;
            for i in 0..p {
                dx[r * len_in + t * p + i] = v;
            }
        }
    }
    dx
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

/// Everything the backward pass needs.
pub(crate) struct Cache {
    batch: usize,
    ys: Vec<f64>,
    u: Vec<f64>,
    a1: Vec<f64>,
    c1: Vec<f64>,
    m1: Vec<f64>,
    v1: Vec<f64>,
    s_tot: Vec<f64>,
    g_tot: Vec<f64>,
    bn2_xhat: Vec<f64>,
    bn2_inv_std: Vec<f64>,
    elu1: Vec<f64>,
    mask1: Option<Vec<f64>>,
    p1: Vec<f64>,
    q: Vec<f64>,
    bn3_xhat: Vec<f64>,
    bn3_inv_std: Vec<f64>,
    elu2: Vec<f64>,
    mask2: Option<Vec<f64>>,
    h: Vec<f64>,
    pub(crate) logits: Vec<f64>,
    pub(crate) probs: Vec<f64>,
}

pub(crate) struct ForwardPass {
    pub(crate) cache: Cache,
    /// Batch statistics to fold into the running averages (train mode).
    batch_stats: Option<[(Vec<f64>, Vec<f64>); 3]>,
}

pub(crate) fn forward(
    model: &CnnModel,
    inputs: &[&CnnInput],
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardPass> {
    let a = &model.arch;
    let p = &model.params;
    let b = inputs.len();
    if b == 0 {
        return Err(Error::Empty("empty batch".into()));
    }
    let (c, t, k1) = (a.n_channels, a.n_samples, a.temporal_kernel);
    for inp in inputs {
        if inp.dims() != (c, t) {
            return Err(Error::shape(
                format!("{c} channels x {t} samples"),
                format!("{} channels x {} samples", inp.n_channels, inp.n_samples),
            ));
        }
        if inp.kernel != k1 {
            return Err(Error::Config(format!(
                "input prepared for temporal kernel {}, model uses {k1}",
                inp.kernel
            )));
        }
    }
    let (f1, dm, o, f2) = (a.f1, a.depth_mult, a.n_depth(), a.f2);
    let h1 = (k1 - 1) / 2;

    // Channel mixing, then temporal convolution of each mixed series.
    let mut ys = vec![0.0; b * o * t];
    for (bi, inp) in inputs.iter().enumerate() {
        for oi in 0..o {
            let dst = &mut ys[(bi * o + oi) * t..][..t];
            let w = &p.spatial[oi * c..][..c];
            for (ci, wc) in w.iter().enumerate() {
                let row = &inp.x[ci * t..][..t];
                for (d, x) in dst.iter_mut().zip(row) {
                    *d += wc * x;
                }
            }
        }
    }
    let mut u = vec![0.0; b * o * t];
    for bi in 0..b {
        for oi in 0..o {
            let kernel = &p.temporal[(oi / dm) * k1..][..k1];
            let src = &ys[(bi * o + oi) * t..][..t];
            let dst = &mut u[(bi * o + oi) * t..][..t];
            conv_same(src, kernel, h1, dst);
        }
    }

    // BN1 statistics from the sufficient statistics.
    let n1 = (b * c * t) as f64;
    let mut s_tot = vec![0.0; k1];
    let mut g_tot = vec![0.0; k1 * k1];
    let (m1, v1) = match mode {
        Mode::Train => {
            for inp in inputs {
                for (d, v) in s_tot.iter_mut().zip(&inp.s) {
                    *d += v;
                }
                for (d, v) in g_tot.iter_mut().zip(&inp.g) {
                    *d += v;
                }
            }
            let mut m = vec![0.0; f1];
            let mut v = vec![0.0; f1];
            for f in 0..f1 {
                let k = &p.temporal[f * k1..][..k1];
                m[f] = dot(k, &s_tot) / n1;
                let gk = matvec(&g_tot, k, k1);
                v[f] = (dot(k, &gk) / n1 - m[f] * m[f]).max(0.0);
            }
            (m, v)
        }
        Mode::Eval => (model.bn1.mean.clone(), model.bn1.var.clone()),
    };
    let a1: Vec<f64> = (0..f1).map(|f| p.bn1_gamma[f] / (v1[f] + BN_EPS).sqrt()).collect();
    let c1: Vec<f64> = (0..f1).map(|f| p.bn1_beta[f] - a1[f] * m1[f]).collect();
    let sigma: Vec<f64> = (0..o).map(|oi| p.spatial[oi * c..][..c].iter().sum()).collect();
    let mut y = vec![0.0; b * o * t];
    for bi in 0..b {
        for oi in 0..o {
            let f = oi / dm;
            let off = (bi * o + oi) * t;
            let shift = c1[f] * sigma[oi];
            for i in off..off + t {
                y[i] = a1[f] * u[i] + shift;
            }
        }
    }

    let bn2 = bn_forward(&y, b, o, t, &p.bn2_gamma, &p.bn2_beta, mode, &model.bn2);
    let elu1: Vec<f64> = bn2.out.iter().map(|&v| elu(v)).collect();
    let (t1, t2) = (a.t1(), a.t2());
    let mut p1 = avg_pool(&elu1, b * o, t, a.pool1);

    let mut rng = rng;
    let use_dropout = mode == Mode::Train && a.dropout_p > 0.0 && rng.is_some();
    let mask1 = if use_dropout {
        let m = dropout_mask(rng.as_deref_mut().expect("checked"), p1.len(), a.dropout_p);
        p1.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
        Some(m)
    } else {
        None
    };

    // Separable convolution.
    let k2 = a.separable_kernel;
    let left = (k2 - 1) / 2;
    let mut q = vec![0.0; b * o * t1];
    for bi in 0..b {
        for oi in 0..o {
            let src = &p1[(bi * o + oi) * t1..][..t1];
            let dst = &mut q[(bi * o + oi) * t1..][..t1];
            conv_same(src, &p.sep_depth[oi * k2..][..k2], left, dst);
        }
    }
    let mut r = vec![0.0; b * f2 * t1];
    for bi in 0..b {
        for g in 0..f2 {
            let dst = &mut r[(bi * f2 + g) * t1..][..t1];
            for oi in 0..o {
                let w = p.sep_point[g * o + oi];
                let src = &q[(bi * o + oi) * t1..][..t1];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    let bn3 = bn_forward(&r, b, f2, t1, &p.bn3_gamma, &p.bn3_beta, mode, &model.bn3);
    let elu2: Vec<f64> = bn3.out.iter().map(|&v| elu(v)).collect();
    let mut hflat = avg_pool(&elu2, b * f2, t1, a.pool2);
    let mask2 = if use_dropout {
        let m = dropout_mask(rng.as_deref_mut().expect("checked"), hflat.len(), a.dropout_p);
        hflat.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
        Some(m)
    } else {
        None
    };

    let nc = a.n_classes;
    let flat = f2 * t2;
    let mut logits = vec![0.0; b * nc];
    let mut probs = vec![0.0; b * nc];
    for bi in 0..b {
        let hx = &hflat[bi * flat..][..flat];
        for k in 0..nc {
            logits[bi * nc + k] = dot(&p.dense_w[k * flat..][..flat], hx) + p.dense_b[k];
        }
        let l = &logits[bi * nc..][..nc];
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.iter().map(|v| (v - max).exp()).sum();
        for k in 0..nc {
            probs[bi * nc + k] = (l[k] - max).exp() / z;
        }
    }

    let batch_stats = (mode == Mode::Train).then(|| {
        [
            (m1.clone(), v1.clone()),
            (bn2.mean.clone(), bn2.var.clone()),
            (bn3.mean.clone(), bn3.var.clone()),
        ]
    });
    Ok(ForwardPass {
        cache: Cache {
            batch: b,
            ys,
            u,
            a1,
            c1,
            m1,
            v1,
            s_tot,
            g_tot,
            bn2_xhat: bn2.xhat,
            bn2_inv_std: bn2.inv_std,
            elu1,
            mask1,
            p1,
            q,
            bn3_xhat: bn3.xhat,
            bn3_inv_std: bn3.inv_std,
            elu2,
            mask2,
            h: hflat,
            logits,
            probs,
        },
        batch_stats,
    })
}

impl ForwardPass {
    /// Mean cross-entropy against the inputs' labels.
    pub(crate) fn loss(&self, inputs: &[&CnnInput]) -> f64 {
        let nc = N_CLASSES;
        inputs
            .iter()
            .enumerate()
            .map(|(bi, inp)| {
                let l = &self.cache.logits[bi * nc..][..nc];
                let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - l[inp.label.index()]
            })
            .sum::<f64>()
            / inputs.len() as f64
    }

    pub(crate) fn n_correct(&self, inputs: &[&CnnInput]) -> usize {
        inputs
            .iter()
            .enumerate()
            .filter(|(bi, inp)| {
                let p = &self.cache.probs[bi * N_CLASSES..][..N_CLASSES];
                crate::ovr::argmax_class(&[p[0], p[1], p[2], p[3]]) == inp.label
            })
            .count()
    }

    pub(crate) fn commit_running_stats(&self, model: &mut CnnModel) {
        if let Some([s1, s2, s3]) = &self.batch_stats {
            model.bn1.update(&s1.0, &s1.1);
            model.bn2.update(&s2.0, &s2.1);
            model.bn3.update(&s3.0, &s3.1);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&m[i * n..][..n], v)).collect()
}

/// `dst(t) = Σ_j k[j] src(t + j - left)`, zero outside `src`.
fn conv_same(src: &[f64], k: &[f64], left: usize, dst: &mut [f64]) {
    let t = src.len();
    for (j, &kj) in k.iter().enumerate() {
        // t + j - left in [0, t)
        let lo = left.saturating_sub(j);
        let hi = (t + left).saturating_sub(j).min(t);
        if lo >= hi {
            continue;
        }
        let s0 = lo + j - left;
        for (d, s) in dst[lo..hi].iter_mut().zip(&src[s0..s0 + hi - lo]) {
            *d += kj * s;
        }
    }
}

/// Adjoint of [`conv_same`]: accumulates into `dsrc` and `dk`.
fn conv_same_backward(src: &[f64], k: &[f64], left: usize, g: &[f64], dsrc: &mut [f64], dk: &mut [f64]) {
    let t = src.len();
    for (j, &kj) in k.iter().enumerate() {
        let lo = left.saturating_sub(j);
        let hi = (t + left).saturating_sub(j).min(t);
        if lo >= hi {
            continue;
        }
        let s0 = lo + j - left;
        let gs = &g[lo..hi];
        let mut acc = 0.0;
        for (gv, (ds, s)) in gs
            .iter()
            .zip(dsrc[s0..s0 + hi - lo].iter_mut().zip(&src[s0..s0 + hi - lo]))
        {
            *ds += kj * gv;
            acc += gv * s;
        }
        dk[j] += acc;
    }
}

/// Gradient of the mean cross-entropy with respect to every parameter.
pub(crate) fn backward(model: &CnnModel, inputs: &[&CnnInput], pass: &ForwardPass, mode: Mode) -> CnnParams {
    let a = &model.arch;
    let p = &model.params;
    let cache = &pass.cache;
    let b = cache.batch;
    let (c, t, k1, k2) = (a.n_channels, a.n_samples, a.temporal_kernel, a.separable_kernel);
    let (f1, dm, o, f2) = (a.f1, a.depth_mult, a.n_depth(), a.f2);
    let (t1, t2) = (a.t1(), a.t2());
    let nc = a.n_classes;
    let flat = f2 * t2;
    let mut grad = CnnParams::zeros(a);

    // Softmax cross-entropy.
    let mut dlogits = cache.probs.clone();
    for (bi, inp) in inputs.iter().enumerate() {
        dlogits[bi * nc + inp.label.index()] -= 1.0;
    }
    dlogits.iter_mut().for_each(|v| *v /= b as f64);

    // Dense.
    let mut dh = vec![0.0; b * flat];
    for bi in 0..b {
        let hx = &cache.h[bi * flat..][..flat];
        for k in 0..nc {
            let gk = dlogits[bi * nc + k];
            grad.dense_b[k] += gk;
            let w = &p.dense_w[k * flat..][..flat];
            let dw = &mut grad.dense_w[k * flat..][..flat];
            let dhx = &mut dh[bi * flat..][..flat];
            for i in 0..flat {
                dw[i] += gk * hx[i];
                dhx[i] += gk * w[i];
            }
        }
    }
    if let Some(m) = &cache.mask2 {
        dh.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
    let mut d_elu2 = avg_pool_backward(&dh, b * f2, t1, a.pool2);
    for (g, y) in d_elu2.iter_mut().zip(&cache.elu2) {
        *g *= elu_grad_from_output(*y);
    }
    let dr = bn_backward(
        &d_elu2,
        &cache.bn3_xhat,
        &cache.bn3_inv_std,
        &p.bn3_gamma,
        b,
        f2,
        t1,
        mode,
        &mut grad.bn3_gamma,
        &mut grad.bn3_beta,
    );

    // Pointwise.
    let mut dq = vec![0.0; b * o * t1];
    for bi in 0..b {
        for g in 0..f2 {
            let drg = &dr[(bi * f2 + g) * t1..][..t1];
            for oi in 0..o {
                let qs = &cache.q[(bi * o + oi) * t1..][..t1];
                grad.sep_point[g * o + oi] += dot(drg, qs);
                let w = p.sep_point[g * o + oi];
                let dst = &mut dq[(bi * o + oi) * t1..][..t1];
                for (d, v) in dst.iter_mut().zip(drg) {
                    *d += w * v;
                }
            }
        }
    }
    // Depthwise temporal.
    let left = (k2 - 1) / 2;
    let mut dp1 = vec![0.0; b * o * t1];
    for bi in 0..b {
        for oi in 0..o {
            let off = (bi * o + oi) * t1;
            conv_same_backward(
                &cache.p1[off..off + t1],
                &p.sep_depth[oi * k2..][..k2],
                left,
                &dq[off..off + t1],
                &mut dp1[off..off + t1],
                &mut grad.sep_depth[oi * k2..][..k2],
            );
        }
    }
    if let Some(m) = &cache.mask1 {
        dp1.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
    let mut d_elu1 = avg_pool_backward(&dp1, b * o, t, a.pool1);
    for (g, y) in d_elu1.iter_mut().zip(&cache.elu1) {
        *g *= elu_grad_from_output(*y);
    }
    let dy = bn_backward(
        &d_elu1,
        &cache.bn2_xhat,
        &cache.bn2_inv_std,
        &p.bn2_gamma,
        b,
        o,
        t,
        mode,
        &mut grad.bn2_gamma,
        &mut grad.bn2_beta,
    );

    // y = a_f (k_f ⋆ ys) + c_f σ_o
    let h1 = (k1 - 1) / 2;
    let mut d_a = vec![0.0; f1];
    let mut d_c = vec![0.0; f1];
    let mut dys = vec![0.0; t];
    let mut gu = vec![0.0; t];
    for bi in 0..b {
        for oi in 0..o {
            let f = oi / dm;
            let off = (bi * o + oi) * t;
            let g = &dy[off..off + t];
            let sum_g: f64 = g.iter().sum();
            d_a[f] += dot(g, &cache.u[off..off + t]);
            let sigma: f64 = p.spatial[oi * c..][..c].iter().sum();
            d_c[f] += sigma * sum_g;
            for (dst, v) in gu.iter_mut().zip(g) {
                *dst = cache.a1[f] * v;
            }
            dys.fill(0.0);
            conv_same_backward(
                &cache.ys[off..off + t],
                &p.temporal[f * k1..][..k1],
                h1,
                &gu,
                &mut dys,
                &mut grad.temporal[f * k1..][..k1],
            );
            let ds = &mut grad.spatial[oi * c..][..c];
            let x = &inputs[bi].x;
            for (ci, d) in ds.iter_mut().enumerate() {
                *d += dot(&dys, &x[ci * t..][..t]) + cache.c1[f] * sum_g;
            }
        }
    }
    let n1 = (b * c * t) as f64;
    for f in 0..f1 {
        let ra = 1.0 / (cache.v1[f] + BN_EPS).sqrt();
        let m = cache.m1[f];
        grad.bn1_beta[f] += d_c[f];
        let da_total = d_a[f] - m * d_c[f];
        grad.bn1_gamma[f] += da_total * ra;
        if mode == Mode::Train {
            let dmean = -cache.a1[f] * d_c[f];
            let dvar = da_total * p.bn1_gamma[f] * -0.5 * ra * ra * ra;
            let k = &p.temporal[f * k1..][..k1];
            let gk = matvec(&cache.g_tot, k, k1);
            let dk = &mut grad.temporal[f * k1..][..k1];
            for j in 0..k1 {
                let s = cache.s_tot[j] / n1;
                dk[j] += dmean * s + dvar * (2.0 * gk[j] / n1 - 2.0 * m * s);
            }
        }
    }
    grad
}
