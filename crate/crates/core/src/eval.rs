//! Repeated stratified cross-validation.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::{train, CnnArch, CnnInput, CnnModel, Hyperparams};
use crate::csp::EpochStats;
use crate::domain::{Condition, Dataset, Epoch, TextureClass, N_CLASSES};
use crate::error::{Error, Result};
use crate::ovr::{argmax_class, fit_ovr_stats, CspLdaParams};
use crate::preprocess::{clean, downsample, FilterSpec};
use crate::seed::{derive_seed, rng_for};

pub const CHANCE_LEVEL: f64 = 1.0 / N_CLASSES as f64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvPlan {
    pub n_folds: usize,
    pub n_repeats: usize,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            n_folds: 5,
            n_repeats: 5,
            seed: 0,
            stratified: true,
        }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(Error::Config("cv.n_folds must be at least 2".into()));
        }
        if self.n_repeats == 0 {
            return Err(Error::Config("cv.n_repeats must be positive".into()));
        }
        Ok(())
    }

    pub fn n_runs(&self) -> usize {
        self.n_folds * self.n_repeats
    }
}

/// Test-index sets, `folds[repeat][fold]`. Each repeat partitions
/// `0..labels.len()`; with stratification every class is dealt round-robin
/// so per-class counts across folds differ by at most one.
pub fn make_folds(labels: &[TextureClass], plan: &CvPlan) -> Result<Vec<Vec<Vec<usize>>>> {
    plan.validate()?;
    if labels.len() < plan.n_folds {
        return Err(Error::Config(format!(
            "{} epochs cannot fill {} folds",
            labels.len(),
            plan.n_folds
        )));
    }
    if plan.stratified {
        for class in TextureClass::ALL {
            let k = labels.iter().filter(|l| **l == class).count();
            if k > 0 && k < plan.n_folds {
                return Err(Error::Config(format!(
                    "class {class} has {k} epochs, fewer than {} folds",
                    plan.n_folds
                )));
            }
        }
    }
    let mut out = Vec::with_capacity(plan.n_repeats);
    for repeat in 0..plan.n_repeats {
        let mut rng = rng_for(plan.seed, "cv-folds", repeat as u64);
        let mut folds = vec![Vec::new(); plan.n_folds];
        let groups: Vec<Vec<usize>> = if plan.stratified {
            TextureClass::ALL
                .iter()
                .map(|c| (0..labels.len()).filter(|&i| labels[i] == *c).collect())
                .collect()
        } else {
            vec![(0..labels.len()).collect()]
        };
        // The deal position carries over between classes so that fold
        // totals stay balanced as well.
        let mut slot = 0;
        for mut group in groups {
            group.shuffle(&mut rng);
            for idx in group {
                folds[slot % plan.n_folds].push(idx);
                slot += 1;
            }
        }
        for f in &mut folds {
            f.sort_unstable();
        }
        out.push(folds);
    }
    Ok(out)
}

pub type Confusion = [[u64; N_CLASSES]; N_CLASSES];

/// `counts[true][predicted]`.
pub fn confusion(preds: &[TextureClass], truths: &[TextureClass]) -> Result<Confusion> {
    if preds.len() != truths.len() {
        return Err(Error::shape(
            format!("{} predictions", truths.len()),
            preds.len(),
        ));
    }
    let mut counts = [[0u64; N_CLASSES]; N_CLASSES];
    for (p, t) in preds.iter().zip(truths) {
        counts[t.index()][p.index()] += 1;
    }
    Ok(counts)
}

/// Row-normalised confusion; rows without support are `None`.
pub fn normalize_rows(counts: &Confusion) -> [Option<[f64; N_CLASSES]>; N_CLASSES] {
    let mut out = [None; N_CLASSES];
    for (row, dst) in counts.iter().zip(out.iter_mut()) {
        let total: u64 = row.iter().sum();
        if total > 0 {
            let mut r = [0.0; N_CLASSES];
            for (v, c) in r.iter_mut().zip(row) {
                *v = *c as f64 / total as f64;
            }
            *dst = Some(r);
        }
    }
    out
}

/// A classification pipeline evaluated by [`cross_validate`].
///
/// `prepare` may only apply per-epoch transforms (filtering, resampling,
/// covariance estimation). Anything fitted across epochs belongs in
/// [`Prepared::fit_predict`], which sees training indices only.
pub trait Pipeline: Sync {
    fn id(&self) -> &str;
    fn describe(&self) -> String;
    fn prepare<'a>(&'a self, ds: &'a Dataset) -> Result<Box<dyn Prepared + 'a>>;
}

pub trait Prepared: Sync {
    /// Fit on `train`, return one prediction per entry of `test`.
    fn fit_predict(&self, train: &[usize], test: &[usize], seed: u64) -> Result<Vec<TextureClass>>;
}

/// Notch + band-pass, then CSP + one-versus-rest LDA.
#[derive(Clone, Debug, Default)]
pub struct CspLdaPipeline {
    pub filter: FilterSpec,
    pub params: CspLdaParams,
}

struct CspLdaPrepared<'a> {
    params: &'a CspLdaParams,
    stats: Vec<EpochStats>,
    labels: Vec<TextureClass>,
}

impl Pipeline for CspLdaPipeline {
    fn id(&self) -> &str {
        "csp-lda"
    }

    fn describe(&self) -> String {
        format!("{:?} {:?}", self.filter, self.params)
    }

    fn prepare<'a>(&'a self, ds: &'a Dataset) -> Result<Box<dyn Prepared + 'a>> {
        self.params.validate()?;
        let stats = ds
            .epochs
            .par_iter()
            .map(|e| EpochStats::new(&clean(e, &self.filter)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Box::new(CspLdaPrepared {
            params: &self.params,
            stats,
            labels: ds.labels(),
        }))
    }
}

impl Prepared for CspLdaPrepared<'_> {
    fn fit_predict(&self, train: &[usize], test: &[usize], _seed: u64) -> Result<Vec<TextureClass>> {
        let stats: Vec<&EpochStats> = train.iter().map(|&i| &self.stats[i]).collect();
        let labels: Vec<TextureClass> = train.iter().map(|&i| self.labels[i]).collect();
        let clf = fit_ovr_stats(&stats, &labels, self.params)?;
        test.iter()
            .map(|&i| Ok(argmax_class(&clf.scores_from_stats(&self.stats[i])?)))
            .collect()
    }
}

/// Notch + band-pass, decimation, then the compact CNN. Input dimensions
/// in `arch` are replaced by those of the prepared data.
#[derive(Clone, Debug)]
pub struct EegNetPipeline {
    pub filter: FilterSpec,
    pub downsample: usize,
    pub arch: CnnArch,
    pub hp: Hyperparams,
}

impl Default for EegNetPipeline {
    fn default() -> Self {
        Self {
            filter: FilterSpec::default(),
            downsample: 8,
            arch: CnnArch::default(),
            hp: Hyperparams::default(),
        }
    }
}

struct EegNetPrepared<'a> {
    arch: CnnArch,
    hp: &'a Hyperparams,
    inputs: Vec<CnnInput>,
}

impl Pipeline for EegNetPipeline {
    fn id(&self) -> &str {
        "eegnet"
    }

    fn describe(&self) -> String {
        format!("{:?} downsample={} {:?} {:?}", self.filter, self.downsample, self.arch, self.hp)
    }

    fn prepare<'a>(&'a self, ds: &'a Dataset) -> Result<Box<dyn Prepared + 'a>> {
        self.hp.validate()?;
        let k = self.arch.temporal_kernel;
        let inputs = ds
            .epochs
            .par_iter()
            .map(|e| {
                let e = downsample(&clean(e, &self.filter)?, self.downsample, self.filter.bandpass_hi_hz)?;
                CnnInput::new(&e, k)
            })
            .collect::<Result<Vec<_>>>()?;
        let (c, t) = inputs.first().map(|i| i.dims()).unwrap_or((0, 0));
        let arch = CnnArch {
            n_channels: c,
            n_samples: t,
            ..self.arch.clone()
        };
        arch.validate()?;
        Ok(Box::new(EegNetPrepared {
            arch,
            hp: &self.hp,
            inputs,
        }))
    }
}

/// Split `train` into (fit, validation), stratified by class.
pub fn stratified_holdout(
    labels: &[TextureClass],
    train: &[usize],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng_for(seed, "cnn-holdout", 0);
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for class in TextureClass::ALL {
        let mut members: Vec<usize> = train.iter().copied().filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        let n_val = if members.len() >= 2 {
            ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len() - 1)
        } else {
            0
        };
        val.extend_from_slice(&members[..n_val]);
        fit.extend_from_slice(&members[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

impl Prepared for EegNetPrepared<'_> {
    fn fit_predict(&self, train_idx: &[usize], test: &[usize], seed: u64) -> Result<Vec<TextureClass>> {
        let labels: Vec<TextureClass> = self.inputs.iter().map(|i| i.label).collect();
        let (fit, val) = stratified_holdout(&labels, train_idx, self.hp.val_fraction, seed);
        let fit: Vec<&CnnInput> = fit.iter().map(|&i| &self.inputs[i]).collect();
        let val: Vec<&CnnInput> = val.iter().map(|&i| &self.inputs[i]).collect();
        let model = CnnModel::new(self.arch.clone(), &mut rng_for(seed, "cnn-init", 0))?;
        let outcome = train(model, &fit, &val, self.hp, seed)?;
        let test: Vec<&CnnInput> = test.iter().map(|&i| &self.inputs[i]).collect();
        outcome.model.predict(&test)
    }
}

/// Returns the true labels. Test fixture for the harness itself.
#[derive(Clone, Debug, Default)]
pub struct OraclePipeline;

struct OraclePrepared(Vec<TextureClass>);

impl Pipeline for OraclePipeline {
    fn id(&self) -> &str {
        "oracle"
    }

    fn describe(&self) -> String {
        "oracle".into()
    }

    fn prepare<'a>(&'a self, ds: &'a Dataset) -> Result<Box<dyn Prepared + 'a>> {
        Ok(Box::new(OraclePrepared(ds.labels())))
    }
}

impl Prepared for OraclePrepared {
    fn fit_predict(&self, _train: &[usize], test: &[usize], _seed: u64) -> Result<Vec<TextureClass>> {
        Ok(test.iter().map(|&i| self.0[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub repeat: usize,
    pub fold: usize,
    pub n_test: usize,
    /// `None` when the fit failed; see `error`.
    pub accuracy: Option<f64>,
    pub error: Option<String>,
    pub predictions: Vec<(TextureClass, TextureClass)>,
}

impl RunResult {
    pub fn is_valid(&self) -> bool {
        self.accuracy.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pipeline: String,
    pub condition: Option<Condition>,
    pub runs: Vec<RunResult>,
    /// Over valid runs only.
    pub mean: f64,
    /// Population standard deviation (ddof = 0) over valid runs.
    pub std: f64,
    pub n_invalid: usize,
    /// Pooled over all valid runs, `[true][predicted]`.
    pub confusion: Confusion,
    pub chance_level: f64,
    pub config: String,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn normalized_confusion(&self) -> [Option<[f64; N_CLASSES]>; N_CLASSES] {
        normalize_rows(&self.confusion)
    }

    pub fn n_valid(&self) -> usize {
        self.runs.len() - self.n_invalid
    }

    pub fn pooled_accuracy(&self) -> f64 {
        let total: u64 = self.confusion.iter().flatten().sum();
        let correct: u64 = (0..N_CLASSES).map(|i| self.confusion[i][i]).sum();
        correct as f64 / total as f64
    }
}

fn epoch_fingerprint(e: &Epoch) -> u64 {
    let mut h = DefaultHasher::new();
    e.data.dim().hash(&mut h);
    for v in e.data.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Warn about test epochs whose samples also appear in the training set.
pub fn overlap_warnings(ds: &Dataset, folds: &[Vec<Vec<usize>>]) -> Vec<String> {
    let prints: Vec<u64> = ds.epochs.par_iter().map(epoch_fingerprint).collect();
    let mut warnings = Vec::new();
    for (r, rep) in folds.iter().enumerate() {
        for (f, test) in rep.iter().enumerate() {
            let test_set: HashSet<usize> = test.iter().copied().collect();
            let train_prints: HashSet<u64> = (0..prints.len())
                .filter(|i| !test_set.contains(i))
                .map(|i| prints[i])
                .collect();
            let dup: Vec<usize> = test.iter().copied().filter(|&i| train_prints.contains(&prints[i])).collect();
            if !dup.is_empty() {
                warnings.push(format!(
                    "repeat {r} fold {f}: {} test epoch(s) duplicate training data (indices {:?})",
                    dup.len(),
                    dup
                ));
            }
        }
    }
    warnings
}

/// Fit on `train`, score `test`. Errors are captured in the result.
pub fn evaluate_run(
    prepared: &dyn Prepared,
    labels: &[TextureClass],
    train: &[usize],
    test: &[usize],
    seed: u64,
    repeat: usize,
    fold: usize,
) -> RunResult {
    let outcome = prepared.fit_predict(train, test, seed).and_then(|p| {
        if p.len() != test.len() {
            Err(Error::shape(format!("{} predictions", test.len()), p.len()))
        } else {
            Ok(p)
        }
    });
    match outcome {
        Ok(preds) => {
            let pairs: Vec<_> = test.iter().zip(&preds).map(|(&i, p)| (labels[i], *p)).collect();
            let correct = pairs.iter().filter(|(t, p)| t == p).count();
            RunResult {
                repeat,
                fold,
                n_test: test.len(),
                accuracy: Some(correct as f64 / test.len().max(1) as f64),
                error: None,
                predictions: pairs,
            }
        }
        Err(e) => RunResult {
            repeat,
            fold,
            n_test: test.len(),
            accuracy: None,
            error: Some(e.to_string()),
            predictions: Vec::new(),
        },
    }
}

pub fn cross_validate(pipeline: &dyn Pipeline, ds: &Dataset, plan: &CvPlan) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset has no epochs".into()));
    }
    let labels = ds.labels();
    let folds = make_folds(&labels, plan)?;
    let warnings = overlap_warnings(ds, &folds);
    let prepared = pipeline.prepare(ds)?;

    let jobs: Vec<(usize, usize)> = (0..plan.n_repeats)
        .flat_map(|r| (0..plan.n_folds).map(move |f| (r, f)))
        .collect();
    let runs: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(r, f)| {
            let test = &folds[r][f];
            let test_set: HashSet<usize> = test.iter().copied().collect();
            let train: Vec<usize> = (0..labels.len()).filter(|i| !test_set.contains(i)).collect();
            let seed = derive_seed(plan.seed, pipeline.id(), (r * plan.n_folds + f) as u64);
            evaluate_run(prepared.as_ref(), &labels, &train, test, seed, r, f)
        })
        .collect();

    let accs: Vec<f64> = runs.iter().filter_map(|r| r.accuracy).collect();
    let n_invalid = runs.len() - accs.len();
    let (mean, std) = if accs.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let m = accs.iter().sum::<f64>() / accs.len() as f64;
        let v = accs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / accs.len() as f64;
        (m, v.sqrt())
    };
    let mut conf = [[0u64; N_CLASSES]; N_CLASSES];
    for run in &runs {
        for (t, p) in &run.predictions {
            conf[t.index()][p.index()] += 1;
        }
    }
    Ok(EvalReport {
        pipeline: pipeline.id().to_string(),
        condition: ds.epochs.first().map(|e| e.condition),
        runs,
        mean,
        std,
        n_invalid,
        confusion: conf,
        chance_level: CHANCE_LEVEL,
        config: pipeline.describe(),
        warnings,
    })
}

/// Two-sided 95% normal-approximation band for a binomial proportion.
pub fn binomial_band(p: f64, n: usize) -> (f64, f64) {
    let half = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
    (p - half, p + half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ChannelLayout, ProtocolSpec, Provenance};
    use ndarray::Array2;

    fn balanced(n_per: usize) -> Vec<TextureClass> {
        (0..n_per * 4).map(|i| TextureClass::ALL[i % 4]).collect()
    }

    fn tiny_dataset(labels: &[TextureClass]) -> Dataset {
        let epochs = labels
            .iter()
            .enumerate()
            .map(|(i, l)| Epoch {
                data: Array2::from_elem((2, 4), i as f64),
                fs: 100.0,
                label: *l,
                condition: Condition::ActualTouch,
                trial_id: i as u32,
            })
            .collect();
        Dataset {
            epochs,
            layout: ChannelLayout::standard(2).unwrap(),
            protocol: ProtocolSpec::default(),
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn balanced_folds_have_ten_per_class() {
        let labels = balanced(50);
        let folds = make_folds(&labels, &CvPlan::default()).unwrap();
        assert_eq!(folds.len(), 5);
        for rep in &folds {
            for f in rep {
                for c in TextureClass::ALL {
                    assert_eq!(f.iter().filter(|&&i| labels[i] == c).count(), 10);
                }
            }
        }
        assert!(folds.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn too_few_members_is_an_error() {
        let mut labels = balanced(10);
        labels.retain(|l| *l != TextureClass::Paper);
        labels.extend([TextureClass::Paper; 4]);
        assert!(matches!(make_folds(&labels, &CvPlan::default()), Err(Error::Config(_))));
    }

    #[test]
    fn confusion_basics() {
        let all = TextureClass::ALL;
        let c = confusion(&all, &all).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(c[i][j], u64::from(i == j));
            }
        }
        let truths = balanced(3);
        let preds = vec![TextureClass::Fabric; 12];
        let c = confusion(&preds, &truths).unwrap();
        assert!((0..4).all(|i| c[i][0] == 3));
        assert!(confusion(&preds[..3], &truths).is_err());
        let mut counts = [[0u64; 4]; 4];
        counts[0] = [1, 2, 0, 1];
        let n = normalize_rows(&counts);
        assert!((n[0].unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(n[1].is_none());
    }

    #[test]
    fn oracle_is_perfect() {
        let ds = tiny_dataset(&balanced(5));
        let r = cross_validate(&OraclePipeline, &ds, &CvPlan::default()).unwrap();
        assert_eq!(r.runs.len(), 25);
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.std, 0.0);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(r.confusion[i][j], 0);
                }
            }
            assert_eq!(r.confusion[i][i], 25);
        }
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn duplicated_epoch_triggers_overlap_warning() {
        let mut ds = tiny_dataset(&balanced(5));
        let copy = ds.epochs[0].clone();
        ds.epochs.push(Epoch { trial_id: 99, ..copy });
        let r = cross_validate(&OraclePipeline, &ds, &CvPlan::default()).unwrap();
        assert!(!r.warnings.is_empty());
    }

    struct Failing;
    struct FailingPrepared;
    impl Pipeline for Failing {
        fn id(&self) -> &str {
            "failing"
        }
        fn describe(&self) -> String {
            String::new()
        }
        fn prepare<'a>(&'a self, _ds: &'a Dataset) -> Result<Box<dyn Prepared + 'a>> {
            Ok(Box::new(FailingPrepared))
        }
    }
    impl Prepared for FailingPrepared {
        fn fit_predict(&self, _: &[usize], test: &[usize], seed: u64) -> Result<Vec<TextureClass>> {
            if seed % 3 == 0 {
                Err(Error::Numerical("forced".into()))
            } else {
                Ok(test.iter().map(|_| TextureClass::Fur).collect())
            }
        }
    }

    #[test]
    fn failed_runs_are_recorded_not_fatal() {
        let ds = tiny_dataset(&balanced(5));
        let r = cross_validate(&Failing, &ds, &CvPlan::default()).unwrap();
        assert_eq!(r.runs.len(), 25);
        assert_eq!(r.n_invalid, r.runs.iter().filter(|x| !x.is_valid()).count());
        assert!(r.n_invalid > 0 && r.n_invalid < 25);
        assert!((r.mean - 0.25).abs() < 1e-12);
        let total: u64 = r.confusion.iter().flatten().sum();
        assert_eq!(total as usize, r.n_valid() * 4);
    }
}
