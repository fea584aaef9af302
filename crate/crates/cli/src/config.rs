//! Run configuration, read from a TOML file.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! out_dir = "results"
//!
//! [gen]
//! snr_db = 10.0
//! class_similarity = 0.95
//!
//! [cv]
//! n_repeats = 2
//!
//! [run]
//! pipeline = "csp-lda"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use neurotouch::cnn::CnnArch;
use neurotouch::{
    ChannelLayout, Condition, CspLdaParams, CvPlan, FilterSpec, GenConfig, Hyperparams, ProtocolSpec,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineSel {
    CspLda,
    Eegnet,
    Both,
}

impl PipelineSel {
    pub fn ids(self) -> &'static [&'static str] {
        match self {
            PipelineSel::CspLda => &["csp-lda"],
            PipelineSel::Eegnet => &["eegnet"],
            PipelineSel::Both => &["csp-lda", "eegnet"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionSel {
    Touch,
    Imagery,
    Both,
}

impl ConditionSel {
    pub fn conditions(self) -> &'static [Condition] {
        match self {
            ConditionSel::Touch => &[Condition::ActualTouch],
            ConditionSel::Imagery => &[Condition::TouchImagery],
            ConditionSel::Both => &[Condition::ActualTouch, Condition::TouchImagery],
        }
    }
}

/// Generator settings other than the protocol and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub n_channels: usize,
    pub snr_db: f64,
    pub class_similarity: f64,
    pub line_noise_amp_uv: f64,
    pub condition_attenuation: f64,
    pub background_uv: f64,
    pub alpha_background: f64,
    pub response_variability: f64,
    pub nonstationarity: f64,
    pub noise_only: bool,
}

impl Default for GenSection {
    fn default() -> Self {
        let g = GenConfig::default();
        Self {
            n_channels: g.layout.n_channels(),
            snr_db: g.snr_db,
            class_similarity: g.class_similarity,
            line_noise_amp_uv: g.line_noise_amp_uv,
            condition_attenuation: g.condition_attenuation,
            background_uv: g.background_uv,
            alpha_background: g.alpha_background,
            response_variability: g.response_variability,
            nonstationarity: g.nonstationarity,
            noise_only: g.noise_only,
        }
    }
}

/// Cross-validation layout. The shuffling seed is the global `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvSection {
    pub n_folds: usize,
    pub n_repeats: usize,
    pub stratified: bool,
}

impl Default for CvSection {
    fn default() -> Self {
        let p = CvPlan::default();
        Self {
            n_folds: p.n_folds,
            n_repeats: p.n_repeats,
            stratified: p.stratified,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub pipeline: PipelineSel,
    pub condition: ConditionSel,
    /// Read `actual.epo` and `imagery.epo` from here instead of generating.
    pub input_dir: Option<PathBuf>,
    /// Decimation applied before the CNN.
    pub cnn_downsample: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            pipeline: PipelineSel::Both,
            condition: ConditionSel::Both,
            input_dir: None,
            cnn_downsample: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub gen: GenSection,
    pub protocol: ProtocolSpec,
    pub filter: FilterSpec,
    pub csp_lda: CspLdaParams,
    /// `n_channels` and `n_samples` are taken from the data at run time.
    pub cnn: CnnArch,
    pub train: Hyperparams,
    pub cv: CvSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            gen: GenSection::default(),
            protocol: ProtocolSpec::default(),
            filter: FilterSpec::default(),
            csp_lda: CspLdaParams::default(),
            cnn: CnnArch::default(),
            train: Hyperparams::default(),
            cv: CvSection::default(),
            run: RunSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text).map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.gen_config()?.validate()?;
        self.filter.validate(self.protocol.sampling_rate_hz)?;
        self.csp_lda.validate()?;
        self.cnn.validate()?;
        self.train.validate()?;
        self.cv_plan().validate()?;
        if self.run.cnn_downsample == 0 {
            return Err(CliError::Config("run.cnn_downsample must be at least 1".into()));
        }
        Ok(())
    }

    pub fn gen_config(&self) -> Result<GenConfig, CliError> {
        let g = &self.gen;
        Ok(GenConfig {
            protocol: self.protocol.clone(),
            layout: ChannelLayout::standard(g.n_channels)?,
            snr_db: g.snr_db,
            class_similarity: g.class_similarity,
            line_noise_amp_uv: g.line_noise_amp_uv,
            seed: self.seed,
            condition_attenuation: g.condition_attenuation,
            background_uv: g.background_uv,
            alpha_background: g.alpha_background,
            response_variability: g.response_variability,
            nonstationarity: g.nonstationarity,
            noise_only: g.noise_only,
        })
    }

    pub fn cv_plan(&self) -> CvPlan {
        CvPlan {
            n_folds: self.cv.n_folds,
            n_repeats: self.cv.n_repeats,
            seed: self.seed,
            stratified: self.cv.stratified,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.run.pipeline = PipelineSel::CspLda;
        cfg.run.input_dir = Some(PathBuf::from("data"));
        cfg.gen.class_similarity = 0.95;
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn strict_schema() {
        let e = RunConfig::parse("[protocol]\nn_classes = 3\n").unwrap_err();
        assert!(matches!(e, CliError::Config(ref m) if m.contains("fixed at 4")), "{e}");
        assert!(matches!(RunConfig::parse("[gen]\nsnr = 3.0\n"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("typo = 1\n"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("[run]\npipeline = \"svm\"\n"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("[cv]\nn_folds = 1\n"), Err(CliError::Config(_))));
    }
}
