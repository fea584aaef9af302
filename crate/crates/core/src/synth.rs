//! Deterministic synthetic sessions.
//!
//! Each trial is rendered as one continuous recording (rest, cue,
//! fixation, actual touch, imagery) and then segmented like real data.
//! The model per channel is
//!
//! ```text
//! x(t) = h_c · (b_c(t) + √α · r_c(t))      1/f background plus independent
//!                                           8–12 Hz activity, per-trial gain h_c
//!      + p_label[c] · g · a_phase · s(t)    class pattern × 8–12 Hz source
//!      + l_c · sin(2π·60·t + φ)             line interference
//! ```
//!
//! `p_label` are fixed unit vectors drawn per seed. Glass and Paper are
//! rotated to a chosen cosine similarity, which controls how often the two
//! get confused. `g` is a per-trial response gain, `a_phase` is 1 during
//! actual touch and `sqrt(condition_attenuation)` during imagery, zero
//! otherwise. The alpha-band source is a modelling choice; no spectral
//! signature of touch responses is assumed beyond that.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::domain::{
    ChannelLayout, Condition, Dataset, Epoch, ProtocolSpec, Provenance, TextureClass, N_CLASSES,
};
use crate::error::{Error, Result};
use crate::preprocess::{segment, Marker, Phase, RawTrial};
use crate::seed::rng_for;

pub const LINE_HZ: f64 = 60.0;
const SOURCE_BAND_HZ: (f64, f64) = (8.0, 12.0);
const PINK_FLOOR_HZ: f64 = 0.5;
const ONSET_RAMP_S: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub protocol: ProtocolSpec,
    pub layout: ChannelLayout,
    /// Class-source power relative to the per-channel background power.
    pub snr_db: f64,
    /// Cosine similarity between the Glass and Paper patterns.
    pub class_similarity: f64,
    pub line_noise_amp_uv: f64,
    pub seed: u64,
    /// Imagery source power as a fraction of actual-touch power.
    pub condition_attenuation: f64,
    /// RMS of the background on each channel.
    pub background_uv: f64,
    /// Power of ongoing 8–12 Hz activity, independent per channel, as a
    /// fraction of the 1/f background power.
    pub alpha_background: f64,
    /// Log-normal spread of the per-trial response gain.
    pub response_variability: f64,
    /// Log-normal spread of the per-trial, per-channel background gain.
    pub nonstationarity: f64,
    /// Drop the class source entirely (signal power 0).
    pub noise_only: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolSpec::default(),
            layout: ChannelLayout::default(),
            snr_db: 10.0,
            class_similarity: 0.5,
            line_noise_amp_uv: 5.0,
            seed: 0,
            condition_attenuation: 0.5,
            background_uv: 10.0,
            alpha_background: 2.0,
            response_variability: 0.4,
            nonstationarity: 0.3,
            noise_only: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.layout.validate()?;
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        };
        check(self.snr_db.is_finite(), "snr_db must be finite")?;
        check(
            (0.0..=1.0).contains(&self.class_similarity),
            "class_similarity must lie in [0, 1]",
        )?;
        check(
            self.condition_attenuation > 0.0 && self.condition_attenuation <= 1.0,
            "condition_attenuation must lie in (0, 1]",
        )?;
        check(
            self.line_noise_amp_uv.is_finite() && self.line_noise_amp_uv >= 0.0,
            "line_noise_amp_uv must be non-negative",
        )?;
        check(
            self.background_uv.is_finite() && self.background_uv > 0.0,
            "background_uv must be positive",
        )?;
        check(
            self.alpha_background.is_finite() && self.alpha_background >= 0.0,
            "alpha_background must be non-negative",
        )?;
        check(
            self.response_variability.is_finite() && self.response_variability >= 0.0,
            "response_variability must be non-negative",
        )?;
        check(
            self.nonstationarity.is_finite() && self.nonstationarity >= 0.0,
            "nonstationarity must be non-negative",
        )?;
        Ok(())
    }

    fn source_power(&self) -> f64 {
        if self.noise_only {
            0.0
        } else {
            10f64.powf(self.snr_db / 10.0) * self.background_uv * self.background_uv
        }
    }
}

/// Session-wide quantities fixed by the seed.
#[derive(Clone, Debug)]
pub struct SessionModel {
    /// Unit spatial pattern per class, `[N_CLASSES, n_channels]`.
    pub patterns: Array2<f64>,
    pub line_gain: Array1<f64>,
    pub line_phase: f64,
    /// Cue for each trial id.
    pub cues: Vec<TextureClass>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(n, |_| StandardNormal.sample(rng));
    let norm = v.dot(&v).sqrt();
    v / norm
}

impl SessionModel {
    pub fn new(cfg: &GenConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.layout.n_channels();
        let mut rng = rng_for(cfg.seed, "patterns", 0);
        let mut patterns = Array2::zeros((N_CLASSES, n));
        for c in 0..N_CLASSES {
            patterns.row_mut(c).assign(&unit_gaussian(&mut rng, n));
        }
        if n >= 2 {
            let glass = patterns.row(TextureClass::Glass.index()).to_owned();
            let paper = patterns.row(TextureClass::Paper.index()).to_owned();
            let mut ortho = &paper - &(&glass * glass.dot(&paper));
            let norm = ortho.dot(&ortho).sqrt();
            ortho /= norm;
            let rho = cfg.class_similarity;
            let rotated = &glass * rho + &ortho * (1.0 - rho * rho).sqrt();
            patterns.row_mut(TextureClass::Paper.index()).assign(&rotated);
        }

        let mut rng = rng_for(cfg.seed, "line", 0);
        let line_gain = Array1::from_shape_fn(n, |_| rng.gen_range(0.5..1.5));
        let line_phase = rng.gen_range(0.0..2.0 * PI);

        let mut rng = rng_for(cfg.seed, "cues", 0);
        let mut cues: Vec<TextureClass> = TextureClass::ALL
            .iter()
            .flat_map(|&c| std::iter::repeat(c).take(cfg.protocol.trials_per_class))
            .collect();
        cues.shuffle(&mut rng);

        Ok(Self {
            patterns,
            line_gain,
            line_phase,
            cues,
        })
    }
}

/// Fill `out` rows with unit-variance Gaussian noise whose amplitude
/// spectrum is `amplitude(f)`, two rows per complex FFT.
fn shaped_rows(
    out: &mut Array2<f64>,
    fs: f64,
    rng: &mut ChaCha8Rng,
    planner: &mut FftPlanner<f64>,
    amplitude: impl Fn(f64) -> f64,
) {
    let (rows, n) = out.dim();
    let ifft = planner.plan_fft_inverse(n);
    let shape: Vec<f64> = (0..n)
        .map(|k| {
            let k = k.min(n - k);
            if k == 0 {
                return 0.0;
            }
            amplitude(k as f64 * fs / n as f64)
        })
        .collect();
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for pair in (0..rows).step_by(2) {
        for (b, s) in buf.iter_mut().zip(&shape) {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *b = Complex64::new(re * s, im * s);
        }
        ifft.process(&mut buf);
        for (row, part) in [(pair, 0), (pair + 1, 1)] {
            if row >= rows {
                break;
            }
            let mut r = out.row_mut(row);
            for (d, b) in r.iter_mut().zip(&buf) {
                *d = if part == 0 { b.re } else { b.im };
            }
            let mean = r.mean().unwrap_or(0.0);
            r -= mean;
            let sd = (r.dot(&r) / n as f64).sqrt();
            if sd > 0.0 {
                r /= sd;
            }
        }
    }
}

fn pink_rows(out: &mut Array2<f64>, fs: f64, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) {
    shaped_rows(out, fs, rng, planner, |f| 1.0 / f.max(PINK_FLOOR_HZ).sqrt());
}

fn band_rows(out: &mut Array2<f64>, fs: f64, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) {
    let (lo, hi) = SOURCE_BAND_HZ;
    shaped_rows(out, fs, rng, planner, |f| if (lo..=hi).contains(&f) { 1.0 } else { 0.0 });
}

/// Phase onsets in samples, in presentation order.
fn phase_layout(p: &ProtocolSpec) -> Result<Vec<Marker>> {
    let mut onset = 0;
    let mut markers = Vec::with_capacity(5);
    for (phase, len) in [
        (Phase::Rest, p.rest_samples()?),
        (Phase::Cue, p.cue_samples()?),
        (Phase::Fixation, p.fixation_samples()?),
        (Phase::ActualTouch, p.task_samples()?),
        (Phase::Imagery, p.task_samples()?),
    ] {
        markers.push(Marker { phase, onset });
        onset += len;
    }
    Ok(markers)
}

/// Render one trial of the session. Each trial draws from its own
/// random stream, so trials can be produced in any order.
pub fn generate_raw_trial(cfg: &GenConfig, model: &SessionModel, trial_id: u32) -> Result<RawTrial> {
    let p = &cfg.protocol;
    let fs = p.sampling_rate_hz;
    let n_ch = cfg.layout.n_channels();
    let n = p.trial_samples()?;
    let task = p.task_samples()?;
    if n_ch == 0 || n == 0 {
        return Err(Error::Config("zero channels or samples".into()));
    }
    let cue = *model
        .cues
        .get(trial_id as usize)
        .ok_or_else(|| Error::Config(format!("trial {trial_id} outside session")))?;
    let markers = phase_layout(p)?;
    let mut rng = rng_for(cfg.seed, "trial", trial_id as u64);
    let mut planner = FftPlanner::new();

    let mut data = Array2::zeros((n_ch, n));
    pink_rows(&mut data, fs, &mut rng, &mut planner);
    if cfg.alpha_background > 0.0 {
        let mut alpha = Array2::zeros((n_ch, n));
        band_rows(&mut alpha, fs, &mut rng, &mut planner);
        data.scaled_add(cfg.alpha_background.sqrt(), &alpha);
    }
    let s = cfg.nonstationarity;
    for mut row in data.axis_iter_mut(Axis(0)) {
        let z: f64 = StandardNormal.sample(&mut rng);
        row *= cfg.background_uv * (s * z - s * s).exp();
    }

    let power = cfg.source_power();
    if power > 0.0 {
        let r = cfg.response_variability;
        let z: f64 = StandardNormal.sample(&mut rng);
        let gain = power.sqrt() * (r * z - r * r).exp();

        let n_tones = 3;
        let tones: Vec<(f64, f64, f64)> = (0..n_tones)
            .map(|_| {
                (
                    rng.gen_range(SOURCE_BAND_HZ.0..SOURCE_BAND_HZ.1),
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.5..1.0),
                )
            })
            .collect();
        let am_freq = rng.gen_range(0.2..1.0);
        let am_phase = rng.gen_range(0.0..2.0 * PI);
        let tone_power: f64 = tones.iter().map(|t| t.2 * t.2 / 2.0).sum();
        let norm = (tone_power * 1.125).sqrt();

        let touch = markers[3].onset;
        let imagery = markers[4].onset;
        let ramp = ((ONSET_RAMP_S * fs) as usize).max(1).min(task / 2);
        let window = |i: usize| -> f64 {
            let k = i.min(task - 1 - i);
            if k >= ramp {
                1.0
            } else {
                0.5 - 0.5 * (PI * k as f64 / ramp as f64).cos()
            }
        };
        let mut source = Array1::<f64>::zeros(n);
        for (start, amp) in [(touch, 1.0), (imagery, cfg.condition_attenuation.sqrt())] {
            for i in 0..task {
                let t = (start + i) as f64 / fs;
                let carrier: f64 = tones
                    .iter()
                    .map(|&(f, ph, a)| a * (2.0 * PI * f * t + ph).sin())
                    .sum();
                let envelope = 1.0 + 0.5 * (2.0 * PI * am_freq * t + am_phase).sin();
                source[start + i] = gain * amp * window(i) * envelope * carrier / norm;
            }
        }
        let pattern = model.patterns.row(cue.index());
        for (mut row, &w) in data.axis_iter_mut(Axis(0)).zip(pattern.iter()) {
            row.scaled_add(w, &source);
        }
    }

    if cfg.line_noise_amp_uv > 0.0 {
        let t0 = trial_id as f64 * n as f64 / fs;
        let line = Array1::from_shape_fn(n, |i| {
            (2.0 * PI * LINE_HZ * (t0 + i as f64 / fs) + model.line_phase).sin()
        });
        for (mut row, &g) in data.axis_iter_mut(Axis(0)).zip(model.line_gain.iter()) {
            row.scaled_add(cfg.line_noise_amp_uv * g, &line);
        }
    }

    Ok(RawTrial {
        trial_id,
        cue,
        fs,
        data,
        markers,
    })
}

/// Generate the actual-touch and imagery datasets of one session.
pub fn generate_dataset(cfg: &GenConfig) -> Result<(Dataset, Dataset)> {
    let model = SessionModel::new(cfg)?;
    let n_trials = cfg.protocol.total_trials() as u32;
    let pairs: Vec<Vec<Epoch>> = (0..n_trials)
        .into_par_iter()
        .map(|id| {
            let trial = generate_raw_trial(cfg, &model, id)?;
            let seg = segment(std::slice::from_ref(&trial), &cfg.protocol)?;
            match seg.errors.first() {
                Some(e) => Err(Error::Numerical(format!("trial {}: {}", e.trial_id, e.reason))),
                None => Ok(seg.epochs),
            }
        })
        .collect::<Result<_>>()?;

    let description = format!(
        "synthetic: snr_db={} class_similarity={} condition_attenuation={} \
         line_noise_amp_uv={} background_uv={} alpha_background={} response_variability={} nonstationarity={}{}",
        cfg.snr_db,
        cfg.class_similarity,
        cfg.condition_attenuation,
        cfg.line_noise_amp_uv,
        cfg.background_uv,
        cfg.alpha_background,
        cfg.response_variability,
        cfg.nonstationarity,
        if cfg.noise_only { " noise_only" } else { "" }
    );
    let make = |condition: Condition| Dataset {
        epochs: pairs
            .iter()
            .flatten()
            .filter(|e| e.condition == condition)
            .cloned()
            .collect(),
        layout: cfg.layout.clone(),
        protocol: cfg.protocol.clone(),
        provenance: Provenance {
            description: description.clone(),
            seed: Some(cfg.seed),
        },
    };
    Ok((make(Condition::ActualTouch), make(Condition::TouchImagery)))
}

/// Conventional EEG bands used by [`spectral_audit`].
pub const BANDS: [(&str, f64, f64); 4] = [
    ("delta", 1.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 13.0),
    ("beta", 13.0, 30.0),
];

/// Per-channel power spectral density averages, in µV²/Hz.
#[derive(Clone, Debug)]
pub struct PowerSummary {
    /// `[n_channels, 4]` mean PSD in delta, theta, alpha, beta.
    pub band_power: Array2<f64>,
    /// PSD at the bin nearest 60 Hz.
    pub line_power: Array1<f64>,
    /// Mean PSD over 55–58 Hz and 62–65 Hz.
    pub line_neighbors: Array1<f64>,
    pub resolution_hz: f64,
}

impl PowerSummary {
    pub fn band(&self, name: &str) -> Option<Array1<f64>> {
        BANDS
            .iter()
            .position(|b| b.0 == name)
            .map(|i| self.band_power.column(i).to_owned())
    }
}

/// Hann-windowed periodogram averaged over all epochs.
pub fn spectral_audit(ds: &Dataset) -> Result<PowerSummary> {
    let first = ds
        .epochs
        .first()
        .ok_or_else(|| Error::Empty("dataset has no epochs".into()))?;
    let (n_ch, n) = first.data.dim();
    let fs = first.fs;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect();
    let w_energy: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let n_bins = n / 2 + 1;
    let mut psd = Array2::<f64>::zeros((n_ch, n_bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for e in &ds.epochs {
        if e.data.dim() != (n_ch, n) {
            return Err(Error::shape(format!("{n_ch}x{n}"), format!("{:?}", e.data.dim())));
        }
        for (c, row) in e.data.axis_iter(Axis(0)).enumerate() {
            for ((b, x), w) in buf.iter_mut().zip(row.iter()).zip(&window) {
                *b = Complex64::new(x * w, 0.0);
            }
            fft.process(&mut buf);
            for k in 0..n_bins {
                let one_sided = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
                psd[[c, k]] += one_sided * buf[k].norm_sqr() / (fs * w_energy);
            }
        }
    }
    psd /= ds.epochs.len() as f64;

    let df = fs / n as f64;
    let bin = |f: f64| ((f / df).round() as usize).min(n_bins - 1);
    let mean_over = |c: usize, lo: f64, hi: f64| {
        let (a, b) = (bin(lo), bin(hi));
        let span = &psd.row(c).to_vec()[a..b.max(a + 1)];
        span.iter().sum::<f64>() / span.len() as f64
    };
    let mut band_power = Array2::zeros((n_ch, BANDS.len()));
    let mut line_power = Array1::zeros(n_ch);
    let mut line_neighbors = Array1::zeros(n_ch);
    for c in 0..n_ch {
        for (j, &(_, lo, hi)) in BANDS.iter().enumerate() {
            band_power[[c, j]] = mean_over(c, lo, hi);
        }
        if LINE_HZ < fs / 2.0 {
            line_power[c] = psd[[c, bin(LINE_HZ)]];
            line_neighbors[c] = 0.5
                * (mean_over(c, LINE_HZ - 5.0, LINE_HZ - 2.0)
                    + mean_over(c, LINE_HZ + 2.0, LINE_HZ + 5.0));
        }
    }
    Ok(PowerSummary {
        band_power,
        line_power,
        line_neighbors,
        resolution_hz: df,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_dataset;

    pub(crate) fn small_config() -> GenConfig {
        GenConfig {
            protocol: ProtocolSpec {
                trials_per_class: 5,
                ..Default::default()
            },
            layout: ChannelLayout::standard(8).unwrap(),
            ..Default::default()
        }
    }

    #[test]
    fn glass_paper_similarity_is_exact() {
        for rho in [0.0, 0.5, 0.95, 1.0] {
            let cfg = GenConfig {
                class_similarity: rho,
                ..small_config()
            };
            let m = SessionModel::new(&cfg).unwrap();
            let g = m.patterns.row(1);
            let p = m.patterns.row(2);
            assert!((g.dot(&p) - rho).abs() < 1e-12);
            for c in 0..4 {
                let r = m.patterns.row(c);
                assert!((r.dot(&r) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sessions_are_balanced_and_valid() {
        let (actual, imagery) = generate_dataset(&small_config()).unwrap();
        for ds in [&actual, &imagery] {
            assert_eq!(ds.len(), 20);
            assert_eq!(ds.class_counts(), [5; 4]);
            let report = validate_dataset(ds);
            assert!(report.is_valid(), "{:?}", report);
            assert!(report.warnings.is_empty());
        }
        assert!(actual.epochs.iter().all(|e| e.condition == Condition::ActualTouch));
        assert!(imagery.epochs.iter().all(|e| e.condition == Condition::TouchImagery));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&GenConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.0.epochs[0].data, c.0.epochs[0].data);
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            GenConfig { snr_db: f64::NEG_INFINITY, ..small_config() },
            GenConfig { class_similarity: 1.2, ..small_config() },
            GenConfig { condition_attenuation: 0.0, ..small_config() },
            GenConfig {
                protocol: ProtocolSpec { task_duration_s: 0.0, ..Default::default() },
                ..small_config()
            },
        ] {
            assert!(generate_dataset(&cfg).is_err());
        }
        let mut cfg = small_config();
        cfg.layout.channel_names.clear();
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn pink_background_has_unit_variance_and_falling_spectrum() {
        let mut rng = rng_for(1, "t", 0);
        let mut planner = FftPlanner::new();
        let mut out = Array2::zeros((3, 20_000));
        pink_rows(&mut out, 1000.0, &mut rng, &mut planner);
        for row in out.axis_iter(Axis(0)) {
            assert!((row.dot(&row) / 20_000.0 - 1.0).abs() < 1e-9);
        }
        let ds = Dataset {
            epochs: vec![Epoch {
                data: out,
                fs: 1000.0,
                label: TextureClass::Fur,
                condition: Condition::ActualTouch,
                trial_id: 0,
            }],
            layout: ChannelLayout::standard(3).unwrap(),
            protocol: ProtocolSpec::default(),
            provenance: Provenance::default(),
        };
        let s = spectral_audit(&ds).unwrap();
        let theta = s.band("theta").unwrap().mean().unwrap();
        let beta = s.band("beta").unwrap().mean().unwrap();
        // 1/f: mean PSD ratio between the bands is about 21.5/6 ≈ 3.6
        assert!(theta / beta > 2.5 && theta / beta < 5.0, "{}", theta / beta);
    }
}
