//! Shared domain types: texture labels, recording conditions, the trial
//! protocol, electrode layout, and the epoch/dataset containers.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of texture classes. Fixed by the paradigm.
pub const N_CLASSES: usize = 4;

/// The four texture objects, in their canonical code order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TextureClass {
    Fabric,
    Glass,
    Paper,
    Fur,
}

impl TextureClass {
    pub const ALL: [TextureClass; N_CLASSES] = [
        TextureClass::Fabric,
        TextureClass::Glass,
        TextureClass::Paper,
        TextureClass::Fur,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or(Error::ClassCode(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            TextureClass::Fabric => "Fabric",
            TextureClass::Glass => "Glass",
            TextureClass::Paper => "Paper",
            TextureClass::Fur => "Fur",
        }
    }
}

impl fmt::Display for TextureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Encode a label as its stable integer code.
pub fn class_code(label: TextureClass) -> u8 {
    label.code()
}

/// Decode an integer code; anything outside `0..=3` is an error.
pub fn code_to_class(code: u8) -> Result<TextureClass> {
    TextureClass::from_code(code)
}

/// Which task phase an epoch was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    ActualTouch,
    TouchImagery,
}

impl Condition {
    pub const ALL: [Condition; 2] = [Condition::ActualTouch, Condition::TouchImagery];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Condition::ActualTouch),
            1 => Ok(Condition::TouchImagery),
            _ => Err(Error::Format(format!("unknown condition code {code}"))),
        }
    }

    /// Short tag used in file names and CSV columns.
    pub fn tag(self) -> &'static str {
        match self {
            Condition::ActualTouch => "touch",
            Condition::TouchImagery => "imagery",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Condition::ActualTouch => "Actual touch",
            Condition::TouchImagery => "Touch imagery",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.title())
    }
}

/// Timing of one trial and the size of a session.
///
/// A trial runs rest, cue, fixation, actual touch, then imagery. The two
/// task phases each last `task_duration_s` and become one epoch apiece.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSpec {
    pub rest_duration_s: f64,
    pub cue_duration_s: f64,
    pub fixation_duration_s: f64,
    pub task_duration_s: f64,
    pub trials_per_class: usize,
    pub n_classes: usize,
    pub sampling_rate_hz: f64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            rest_duration_s: 3.0,
            cue_duration_s: 2.0,
            fixation_duration_s: 3.0,
            task_duration_s: 5.0,
            trials_per_class: 50,
            n_classes: N_CLASSES,
            sampling_rate_hz: 1000.0,
        }
    }
}

fn whole_samples(seconds: f64, fs: f64, what: &str) -> Result<usize> {
    let n = seconds * fs;
    if !n.is_finite() || n < 0.0 || (n - n.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{what} of {seconds} s at {fs} Hz is not a whole number of samples"
        )));
    }
    Ok(n.round() as usize)
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes != N_CLASSES {
            return Err(Error::Config(format!(
                "n_classes is fixed at {N_CLASSES}, got {}",
                self.n_classes
            )));
        }
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return Err(Error::Config("sampling_rate_hz must be positive".into()));
        }
        if self.trials_per_class == 0 {
            return Err(Error::Config("trials_per_class must be positive".into()));
        }
        if self.task_samples()? == 0 {
            return Err(Error::Config("task_duration_s must be positive".into()));
        }
        self.rest_samples()?;
        self.cue_samples()?;
        self.fixation_samples()?;
        Ok(())
    }

    pub fn total_trials(&self) -> usize {
        self.trials_per_class * self.n_classes
    }

    pub fn task_samples(&self) -> Result<usize> {
        whole_samples(self.task_duration_s, self.sampling_rate_hz, "task duration")
    }

    pub fn rest_samples(&self) -> Result<usize> {
        whole_samples(self.rest_duration_s, self.sampling_rate_hz, "rest duration")
    }

    pub fn cue_samples(&self) -> Result<usize> {
        whole_samples(self.cue_duration_s, self.sampling_rate_hz, "cue duration")
    }

    pub fn fixation_samples(&self) -> Result<usize> {
        whole_samples(
            self.fixation_duration_s,
            self.sampling_rate_hz,
            "fixation duration",
        )
    }

    /// Samples in one complete trial.
    pub fn trial_samples(&self) -> Result<usize> {
        Ok(self.rest_samples()?
            + self.cue_samples()?
            + self.fixation_samples()?
            + 2 * self.task_samples()?)
    }
}

/// Extended 10/20 montage used for 64-channel recordings, without the
/// ground (FCz) and reference (FPz) sites.
pub const STANDARD_64: [&str; 64] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6", "T7", "C3", "Cz",
    "C4", "T8", "TP9", "CP5", "CP1", "CP2", "CP6", "TP10", "P7", "P3", "Pz", "P4", "P8", "PO9",
    "O1", "Oz", "O2", "PO10", "AF7", "AF3", "AF4", "AF8", "F5", "F1", "F2", "F6", "FT9", "FT7",
    "FC3", "FC4", "FT8", "FT10", "C5", "C1", "C2", "C6", "TP7", "CP3", "CPz", "CP4", "TP8", "P5",
    "P1", "P2", "P6", "PO7", "PO3", "POz", "PO4", "PO8",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub channel_names: Vec<String>,
    pub ground_name: String,
    pub reference_name: String,
}

impl Default for ChannelLayout {
    fn default() -> Self {
        Self::standard(64).expect("64 standard channels")
    }
}

impl ChannelLayout {
    /// The first `n` sites of [`STANDARD_64`]. For `n > 64` the extra
    /// channels get generic `E65`, `E66`, ... names.
    pub fn standard(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("layout needs at least one channel".into()));
        }
        let channel_names = (0..n)
            .map(|i| {
                STANDARD_64
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("E{}", i + 1))
            })
            .collect();
        Ok(Self {
            channel_names,
            ground_name: "FCz".into(),
            reference_name: "FPz".into(),
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_names.is_empty() {
            return Err(Error::Config("layout has no channels".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.channel_names {
            if !seen.insert(name.to_ascii_lowercase()) {
                return Err(Error::Config(format!("duplicate channel name {name}")));
            }
        }
        for special in [&self.ground_name, &self.reference_name] {
            if seen.contains(&special.to_ascii_lowercase()) {
                return Err(Error::Config(format!(
                    "{special} is ground/reference and cannot be a data channel"
                )));
            }
        }
        Ok(())
    }
}

/// One labelled task window: `data` is `[n_channels, n_samples]` in µV.
#[derive(Clone, Debug, PartialEq)]
pub struct Epoch {
    pub data: Array2<f64>,
    pub fs: f64,
    pub label: TextureClass,
    pub condition: Condition,
    pub trial_id: u32,
}

impl Epoch {
    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same metadata, new samples.
    pub fn with_data(&self, data: Array2<f64>, fs: f64) -> Epoch {
        Epoch {
            data,
            fs,
            label: self.label,
            condition: self.condition,
            trial_id: self.trial_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub epochs: Vec<Epoch>,
    pub layout: ChannelLayout,
    pub protocol: ProtocolSpec,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub description: String,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn labels(&self) -> Vec<TextureClass> {
        self.epochs.iter().map(|e| e.label).collect()
    }

    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut counts = [0; N_CLASSES];
        for e in &self.epochs {
            counts[e.label.index()] += 1;
        }
        counts
    }

    pub fn fs(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.fs)
    }
}

/// A violated invariant, optionally tied to one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Finding {
    pub epoch_index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.epoch_index {
            Some(i) => write!(f, "epoch {i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Finding>,
    pub warnings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check a dataset against its invariants. Imbalance is a warning only.
pub fn validate_dataset(ds: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut violation = |epoch_index: Option<usize>, message: String| {
        report.violations.push(Finding {
            epoch_index,
            message,
        })
    };

    if let Err(e) = ds.layout.validate() {
        violation(None, e.to_string());
    }
    if let Err(e) = ds.protocol.validate() {
        violation(None, e.to_string());
    }

    let n_channels = ds.layout.n_channels();
    let expected_fs = ds.fs();
    let expected_samples = ds.epochs.first().map(|e| e.n_samples());
    for (i, e) in ds.epochs.iter().enumerate() {
        if e.n_channels() != n_channels {
            violation(
                Some(i),
                format!(
                    "has {} channels, layout has {n_channels}",
                    e.n_channels()
                ),
            );
        }
        if Some(e.fs) != expected_fs {
            violation(Some(i), format!("fs {} differs from {:?}", e.fs, expected_fs));
        }
        if Some(e.n_samples()) != expected_samples {
            violation(
                Some(i),
                format!(
                    "has {} samples, first epoch has {:?}",
                    e.n_samples(),
                    expected_samples
                ),
            );
        }
        if !e.is_finite() {
            violation(Some(i), "contains NaN or infinite samples".into());
        }
    }

    // Epoch length should match the protocol at the epoch's own rate;
    // downsampled datasets keep the protocol's durations.
    if let Some(e) = ds.epochs.first() {
        let expected = ds.protocol.task_duration_s * e.fs;
        if (expected - e.n_samples() as f64).abs() > 0.5 {
            violation(
                None,
                format!(
                    "epochs have {} samples, protocol implies {expected}",
                    e.n_samples()
                ),
            );
        }
    }

    let counts = ds.class_counts();
    if !ds.is_empty() && counts.iter().any(|&c| c != counts[0]) {
        report.warnings.push(Finding {
            epoch_index: None,
            message: format!(
                "class imbalance: {}",
                TextureClass::ALL
                    .iter()
                    .map(|c| format!("{c}={}", counts[c.index()]))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        });
    }
    report
}
