//! IIR filter design and zero-phase application on second-order sections.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// One second-order section in transposed direct form II, `a0 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + self.b[1] * z1 + self.b[2] * z2;
        let den = 1.0 + self.a[0] * z1 + self.a[1] * z2;
        num / den
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Largest pole magnitude.
    fn pole_radius(&self) -> f64 {
        let (a1, a2) = (self.a[0], self.a[1]);
        let disc = a1 * a1 - 4.0 * a2;
        if disc < 0.0 {
            a2.abs().sqrt()
        } else {
            let s = disc.sqrt();
            ((-a1 + s) / 2.0).abs().max(((-a1 - s) / 2.0).abs())
        }
    }
}

/// A cascade of biquads plus the nominal order used for edge padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
    pub order: usize,
}

impl Sos {
    /// Complex response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, fs: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / fs;
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(w))
    }

    /// Single-pass magnitude in dB.
    pub fn gain_db(&self, freq_hz: f64, fs: f64) -> f64 {
        20.0 * self.response(freq_hz, fs).norm().log10()
    }

    /// Steady-state section states for a unit step, as in `sosfilt_zi`.
    fn step_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let h = s.dc_gain();
                let z2 = s.b[2] - s.a[1] * h;
                let z1 = h - s.b[0];
                let out = [z1 * scale, z2 * scale];
                scale *= h;
                out
            })
            .collect()
    }

    /// Padding long enough for the slowest pole to decay by 1e-6, and
    /// never shorter than three times the order.
    pub fn pad_len(&self) -> usize {
        let r = self
            .sections
            .iter()
            .map(Biquad::pole_radius)
            .fold(0.0, f64::max);
        let decay = if r > 0.0 && r < 1.0 {
            ((1e-6f64).ln() / r.ln()).ceil() as usize
        } else {
            0
        };
        decay.max(3 * self.order)
    }

    /// Causal filtering in place, starting from `state`.
    fn run(&self, x: &mut [f64], mut state: Vec<[f64; 2]>) {
        for v in x.iter_mut() {
            let mut input = *v;
            for (s, z) in self.sections.iter().zip(state.iter_mut()) {
                let y = s.b[0] * input + z[0];
                z[0] = s.b[1] * input - s.a[0] * y + z[1];
                z[1] = s.b[2] * input - s.a[1] * y;
                input = y;
            }
            *v = input;
        }
    }

    /// Zero-phase forward-backward filtering of one channel.
    ///
    /// Both ends are extended by autoregressive prediction for
    /// [`Sos::pad_len`] samples, so stationary rhythms and line noise run
    /// through the edges without a phase jump. Each pass starts from the
    /// step steady state scaled by its first sample.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = self.pad_len();
        let mut ext = ar_extend(x, pad, EDGE_AR_ORDER);

        let zi = self.step_state();
        let scaled = |x0: f64| -> Vec<[f64; 2]> {
            zi.iter().map(|z| [z[0] * x0, z[1] * x0]).collect()
        };

        let state = scaled(ext[0]);
        self.run(&mut ext, state);
        ext.reverse();
        let state = scaled(ext[0]);
        self.run(&mut ext, state);
        ext.reverse();
        ext.truncate(pad + n);
        ext.split_off(pad)
    }

    /// Chain another cascade after this one.
    pub fn then(mut self, other: &Sos) -> Sos {
        self.sections.extend_from_slice(&other.sections);
        self.order += other.order;
        self
    }
}

const EDGE_AR_ORDER: usize = 16;

/// Burg estimate of AR coefficients `a[1..=order]` (with `a[0] = 1`),
/// so that `x[t] ≈ -Σ a[i] x[t-i]`.
pub fn burg_ar(x: &[f64], order: usize) -> Vec<f64> {
    let n = x.len();
    let order = order.min(n.saturating_sub(1));
    let mut f = x.to_vec();
    let mut b = x.to_vec();
    let mut a = vec![1.0];
    for m in 0..order {
        let (mut num, mut den) = (0.0, 0.0);
        for t in m + 1..n {
            num += f[t] * b[t - 1];
            den += f[t] * f[t] + b[t - 1] * b[t - 1];
        }
        if den <= f64::MIN_POSITIVE {
            break;
        }
        let k = -2.0 * num / den;
        for t in (m + 1..n).rev() {
            let (ft, bt) = (f[t], b[t - 1]);
            f[t] = ft + k * bt;
            b[t] = bt + k * ft;
        }
        a.push(0.0);
        let prev = a.clone();
        for i in 0..a.len() {
            a[i] = prev[i] + k * prev[a.len() - 1 - i];
        }
    }
    a
}

/// Extend `x` by `pad` predicted samples on each side. The mean is
/// removed before fitting and restored afterwards. Ill-conditioned fits
/// can extrapolate with growing amplitude; those fall back to lower
/// orders, ending at a flat extension.
fn ar_extend(x: &[f64], pad: usize, max_order: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let peak = centered.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let extrapolate = |a: &[f64], seed: &mut Vec<f64>| -> bool {
        for _ in 0..pad {
            let len = seed.len();
            let next = -(1..a.len()).map(|i| a[i] * seed[len - i]).sum::<f64>();
            if !(next.abs() <= 2.0 * peak) {
                return false;
            }
            seed.push(next);
        }
        true
    };

    let mut order = max_order;
    let (forward, backward) = loop {
        let a = burg_ar(&centered, order);
        let mut forward = centered.clone();
        let mut backward: Vec<f64> = centered.iter().rev().copied().collect();
        if order == 0 || (extrapolate(&a, &mut forward) && extrapolate(&a, &mut backward)) {
            if order == 0 {
                forward.resize(n + pad, 0.0);
                backward.resize(n + pad, 0.0);
            }
            break (forward, backward);
        }
        order /= 2;
    };

    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend(backward[n..].iter().rev().map(|v| v + mean));
    out.extend_from_slice(x);
    out.extend(forward[n..].iter().map(|v| v + mean));
    out
}

/// Second-order notch with the same parameterisation as `scipy.signal.iirnotch`.
pub fn design_notch(notch_hz: f64, q: f64, fs: f64) -> Result<Sos> {
    if !(notch_hz > 0.0 && notch_hz < fs / 2.0) {
        return Err(Error::FilterSpec(format!(
            "notch frequency {notch_hz} Hz must lie in (0, {}) Hz",
            fs / 2.0
        )));
    }
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::FilterSpec(format!("notch Q must be positive, got {q}")));
    }
    let w0 = 2.0 * PI * notch_hz / fs;
    let bw = w0 / q;
    let beta = (bw / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok(Sos {
        sections: vec![Biquad {
            b: [gain, -2.0 * gain * c, gain],
            a: [-2.0 * gain * c, 2.0 * gain - 1.0],
        }],
        order: 2,
    })
}

/// Digital Butterworth band-pass from an `order`-pole analog prototype,
/// bilinear transform with pre-warped corners. Yields `order` sections.
pub fn design_butter_bandpass(order: usize, lo_hz: f64, hi_hz: f64, fs: f64) -> Result<Sos> {
    if order == 0 {
        return Err(Error::FilterSpec("filter order must be positive".into()));
    }
    if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < fs / 2.0) {
        return Err(Error::FilterSpec(format!(
            "band-pass corners must satisfy 0 < lo < hi < fs/2, got {lo_hz}..{hi_hz} at fs {fs}"
        )));
    }
    let k = 2.0 * fs;
    let w_lo = k * (PI * lo_hz / fs).tan();
    let w_hi = k * (PI * hi_hz / fs).tan();
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;

    let mut digital = Vec::with_capacity(2 * order);
    for i in 0..order {
        let m = -(order as f64) + 1.0 + 2.0 * i as f64;
        let p = -Complex64::from_polar(1.0, PI * m / (2.0 * order as f64));
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0_sq).sqrt();
        for s in [(pb + disc) / 2.0, (pb - disc) / 2.0] {
            digital.push((k + s) / (k - s));
        }
    }

    let mut upper: Vec<Complex64> = digital.iter().copied().filter(|z| z.im > 1e-12).collect();
    let mut real: Vec<f64> = digital
        .iter()
        .filter(|z| z.im.abs() <= 1e-12)
        .map(|z| z.re)
        .collect();
    upper.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
    real.sort_by(f64::total_cmp);

    let mut sections: Vec<Biquad> = upper
        .iter()
        .map(|z| Biquad {
            b: [1.0, 0.0, -1.0],
            a: [-2.0 * z.re, z.norm_sqr()],
        })
        .collect();
    for pair in real.chunks(2) {
        let (r1, r2) = (pair[0], *pair.get(1).unwrap_or(&0.0));
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [-(r1 + r2), r1 * r2],
        });
    }

    let center = 2.0 * (w0_sq.sqrt() / k).atan() * fs / (2.0 * PI);
    let mut sos = Sos { sections, order };
    let g = sos.response(center, fs).norm();
    for v in sos.sections[0].b.iter_mut() {
        *v /= g;
    }
    Ok(sos)
}
