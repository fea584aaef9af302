//! Per-epoch filtering, trial segmentation and decimation.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::domain::{Condition, Epoch, ProtocolSpec, TextureClass};
use crate::error::{Error, Result};
use crate::filter::{design_butter_bandpass, design_notch, Sos};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSpec {
    pub notch_hz: f64,
    pub notch_q: f64,
    pub bandpass_lo_hz: f64,
    pub bandpass_hi_hz: f64,
    pub order: usize,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            notch_hz: 60.0,
            notch_q: 30.0,
            bandpass_lo_hz: 4.0,
            bandpass_hi_hz: 40.0,
            order: 4,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self, fs: f64) -> Result<()> {
        self.notch_filter(fs)?;
        self.bandpass_filter(fs)?;
        Ok(())
    }

    pub fn notch_filter(&self, fs: f64) -> Result<Sos> {
        design_notch(self.notch_hz, self.notch_q, fs)
    }

    pub fn bandpass_filter(&self, fs: f64) -> Result<Sos> {
        design_butter_bandpass(self.order, self.bandpass_lo_hz, self.bandpass_hi_hz, fs)
    }
}

fn filter_rows(epoch: &Epoch, sos: &Sos) -> Epoch {
    let mut out = Array2::zeros(epoch.data.raw_dim());
    for (src, mut dst) in epoch.data.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let row: Vec<f64> = src.iter().copied().collect();
        for (d, v) in dst.iter_mut().zip(sos.filtfilt(&row)) {
            *d = v;
        }
    }
    epoch.with_data(out, epoch.fs)
}

/// Zero-phase line-noise notch on every channel.
pub fn notch(epoch: &Epoch, spec: &FilterSpec) -> Result<Epoch> {
    Ok(filter_rows(epoch, &spec.notch_filter(epoch.fs)?))
}

/// Zero-phase Butterworth band-pass on every channel.
pub fn bandpass(epoch: &Epoch, spec: &FilterSpec) -> Result<Epoch> {
    Ok(filter_rows(epoch, &spec.bandpass_filter(epoch.fs)?))
}

/// Notch and band-pass as one cascade, so the edges are extended once.
pub fn clean(epoch: &Epoch, spec: &FilterSpec) -> Result<Epoch> {
    let sos = spec.notch_filter(epoch.fs)?.then(&spec.bandpass_filter(epoch.fs)?);
    Ok(filter_rows(epoch, &sos))
}

/// Keep every `factor`-th sample. `anti_alias_hi_hz` is the upper corner
/// of the low-pass already applied, which must sit below the new Nyquist.
pub fn downsample(epoch: &Epoch, factor: usize, anti_alias_hi_hz: f64) -> Result<Epoch> {
    if factor == 0 {
        return Err(Error::Config("downsample factor must be at least 1".into()));
    }
    if factor == 1 {
        return Ok(epoch.clone());
    }
    let new_nyquist = epoch.fs / (2.0 * factor as f64);
    if anti_alias_hi_hz >= new_nyquist {
        return Err(Error::Config(format!(
            "downsampling by {factor} needs the signal band-limited below {new_nyquist} Hz, \
             but the anti-alias corner is {anti_alias_hi_hz} Hz"
        )));
    }
    let n_out = epoch.n_samples().div_ceil(factor);
    let mut out = Array2::zeros((epoch.n_channels(), n_out));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(epoch.data.axis_iter(Axis(0))) {
        for (d, s) in dst.iter_mut().zip(src.iter().step_by(factor)) {
            *d = *s;
        }
    }
    Ok(epoch.with_data(out, epoch.fs / factor as f64))
}

/// Trial phases in presentation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Rest,
    Cue,
    Fixation,
    ActualTouch,
    Imagery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Marker {
    pub phase: Phase,
    /// Onset in samples from the start of the trial recording.
    pub onset: usize,
}

/// Continuous recording of a single trial with its phase markers.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrial {
    pub trial_id: u32,
    /// Texture shown at the cue.
    pub cue: TextureClass,
    pub fs: f64,
    pub data: Array2<f64>,
    pub markers: Vec<Marker>,
}

impl RawTrial {
    pub fn onset(&self, phase: Phase) -> Option<usize> {
        self.markers.iter().find(|m| m.phase == phase).map(|m| m.onset)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentError {
    pub trial_id: u32,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Segmented {
    pub epochs: Vec<Epoch>,
    pub errors: Vec<SegmentError>,
}

impl Segmented {
    pub fn condition(&self, condition: Condition) -> impl Iterator<Item = &Epoch> {
        self.epochs.iter().filter(move |e| e.condition == condition)
    }
}

/// Cut one actual-touch and one imagery epoch per trial. A trial that
/// cannot supply both is reported and skipped; the rest are unaffected.
pub fn segment(stream: &[RawTrial], protocol: &ProtocolSpec) -> Result<Segmented> {
    let task = protocol.task_samples()?;
    let mut out = Segmented::default();
    for trial in stream {
        match segment_trial(trial, protocol, task) {
            Ok(pair) => out.epochs.extend(pair),
            Err(reason) => out.errors.push(SegmentError {
                trial_id: trial.trial_id,
                reason,
            }),
        }
    }
    Ok(out)
}

fn segment_trial(
    trial: &RawTrial,
    protocol: &ProtocolSpec,
    task: usize,
) -> std::result::Result<[Epoch; 2], String> {
    if (trial.fs - protocol.sampling_rate_hz).abs() > 1e-9 {
        return Err(format!(
            "trial sampled at {} Hz, protocol expects {} Hz",
            trial.fs, protocol.sampling_rate_hz
        ));
    }
    let cut = |phase: Phase, condition: Condition| {
        let onset = trial
            .onset(phase)
            .ok_or_else(|| format!("no {phase:?} marker"))?;
        let end = onset + task;
        if end > trial.data.ncols() {
            return Err(format!(
                "truncated: {phase:?} needs samples {onset}..{end}, recording has {}",
                trial.data.ncols()
            ));
        }
        Ok(Epoch {
            data: trial.data.slice(ndarray::s![.., onset..end]).to_owned(),
            fs: trial.fs,
            label: trial.cue,
            condition,
            trial_id: trial.trial_id,
        })
    };
    Ok([
        cut(Phase::ActualTouch, Condition::ActualTouch)?,
        cut(Phase::Imagery, Condition::TouchImagery)?,
    ])
}
