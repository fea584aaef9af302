use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use neurotouch::io::{read_dataset, read_epochs, write_epochs};
use neurotouch::preprocess::{clean, downsample};
use neurotouch::report::render_report;
use neurotouch::{
    cross_validate, generate_dataset, Condition, CspLdaPipeline, Dataset, EegNetPipeline, Epoch,
    EvalReport, Pipeline, TextureClass, N_CLASSES,
};
use neurotouch::eval::{RunResult, CHANCE_LEVEL};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::CliError;

pub const ACTUAL_FILE: &str = "actual.epo";
pub const IMAGERY_FILE: &str = "imagery.epo";
pub const INCOMPLETE_FILE: &str = "INCOMPLETE";

fn file_for(condition: Condition) -> &'static str {
    match condition {
        Condition::ActualTouch => ACTUAL_FILE,
        Condition::TouchImagery => IMAGERY_FILE,
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn class_summary(ds: &Dataset) -> String {
    TextureClass::ALL
        .iter()
        .zip(ds.class_counts())
        .map(|(c, n)| format!("{}={n}", c.name()))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generate both conditions and write them to `out_dir`. Returns the
/// paths written.
pub fn cmd_gen(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let gen = cfg.gen_config()?;
    let (actual, imagery) = generate_dataset(&gen)?;
    create_dir(out_dir)?;
    let mut written = Vec::new();
    for ds in [&actual, &imagery] {
        let path = out_dir.join(file_for(ds.epochs[0].condition));
        write_epochs(&path, &ds.epochs)?;
        written.push(path);
    }
    println!(
        "generated {} epochs per condition ({}), {} channels at {} Hz, snr_db={}, seed={}",
        actual.len(),
        class_summary(&actual),
        actual.layout.n_channels(),
        gen.protocol.sampling_rate_hz,
        gen.snr_db,
        gen.seed
    );
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(written)
}

/// Notch and band-pass every epoch of `input`, optionally decimate, and
/// write the result to `output`.
pub fn cmd_preprocess(cfg: &RunConfig, input: &Path, output: &Path, factor: usize) -> Result<usize, CliError> {
    let epochs = read_epochs(input)?;
    let out: Vec<Epoch> = epochs
        .par_iter()
        .map(|e| downsample(&clean(e, &cfg.filter)?, factor, cfg.filter.bandpass_hi_hz))
        .collect::<neurotouch::Result<_>>()?;
    write_epochs(output, &out)?;
    println!("preprocessed {} epochs: {} -> {}", out.len(), input.display(), output.display());
    Ok(out.len())
}

fn pipeline_for(cfg: &RunConfig, id: &str) -> Box<dyn Pipeline> {
    match id {
        "csp-lda" => Box::new(CspLdaPipeline {
            filter: cfg.filter.clone(),
            params: cfg.csp_lda,
        }),
        _ => Box::new(EegNetPipeline {
            filter: cfg.filter.clone(),
            downsample: cfg.run.cnn_downsample,
            arch: cfg.cnn.clone(),
            hp: cfg.train.clone(),
        }),
    }
}

fn load_condition(cfg: &RunConfig, condition: Condition, generated: &mut Option<(Dataset, Dataset)>) -> Result<Dataset, CliError> {
    if let Some(dir) = &cfg.run.input_dir {
        return Ok(read_dataset(dir.join(file_for(condition)))?);
    }
    if generated.is_none() {
        *generated = Some(generate_dataset(&cfg.gen_config()?)?);
    }
    let (a, i) = generated.as_ref().expect("just generated");
    Ok(match condition {
        Condition::ActualTouch => a.clone(),
        Condition::TouchImagery => i.clone(),
    })
}

#[derive(Debug)]
pub struct RunSummary {
    pub reports: Vec<EvalReport>,
    pub out_dir: PathBuf,
}

/// Cross-validate the selected pipelines on the selected conditions and
/// write `report.txt`, `report.csv`, `confusion.csv` and `config.toml`.
///
/// If a cell fails, the cells finished so far are still written and an
/// `INCOMPLETE` file records the error.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let out_dir = cfg.out_dir.clone();
    let plan = cfg.cv_plan();
    let mut generated = None;
    let mut reports = Vec::new();
    let mut failure = None;

    // Inputs are checked before any output appears.
    let mut datasets = Vec::new();
    for &condition in cfg.run.condition.conditions() {
        datasets.push(load_condition(cfg, condition, &mut generated)?);
    }
    drop(generated);
    create_dir(&out_dir)?;
    let _ = fs::remove_file(out_dir.join(INCOMPLETE_FILE));
    write_text(&out_dir.join("config.toml"), &cfg.to_toml())?;

    'cells: for id in cfg.run.pipeline.ids() {
        let pipeline = pipeline_for(cfg, id);
        for ds in &datasets {
            let tag = ds.epochs.first().map_or("empty", |e| e.condition.tag());
            let started = Instant::now();
            eprintln!("{id} / {tag}: {} epochs, {} runs", ds.len(), plan.n_runs());
            match cross_validate(pipeline.as_ref(), ds, &plan) {
                Ok(r) => {
                    eprintln!(
                        "{id} / {tag}: mean {:.4} std {:.4} ({} invalid) in {:.1} s",
                        r.mean,
                        r.std,
                        r.n_invalid,
                        started.elapsed().as_secs_f64()
                    );
                    if r.n_valid() == 0 {
                        let first = r.runs.iter().find_map(|x| x.error.clone()).unwrap_or_default();
                        failure = Some(CliError::Numerical(format!("every {id} / {tag} run failed: {first}")));
                        reports.push(r);
                        break 'cells;
                    }
                    reports.push(r);
                }
                Err(e) => {
                    failure = Some(CliError::from(e));
                    break 'cells;
                }
            }
        }
    }

    if !reports.is_empty() {
        let rendered = render_report(&reports)?;
        let mut table = rendered.table;
        if let Some(f) = &failure {
            table = format!("INCOMPLETE: {f}\n\n{table}");
        }
        write_text(&out_dir.join("report.txt"), &table)?;
        write_text(&out_dir.join("report.csv"), &rendered.report_csv)?;
        write_text(&out_dir.join("confusion.csv"), &rendered.confusion_csv)?;
        print!("{table}");
    }
    if let Some(f) = failure {
        write_text(&out_dir.join(INCOMPLETE_FILE), &format!("{f}\n"))?;
        return Err(f);
    }
    Ok(RunSummary { reports, out_dir })
}

fn parse_condition(tag: &str) -> Option<Condition> {
    [Condition::ActualTouch, Condition::TouchImagery].into_iter().find(|c| c.tag() == tag)
}

fn parse_class(name: &str) -> Option<TextureClass> {
    TextureClass::ALL.into_iter().find(|c| c.name() == name)
}

fn csv_rows<'a>(text: &'a str, header: &str, path: &Path) -> Result<Vec<(usize, Vec<&'a str>)>, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(CliError::Io(format!("{}: expected header `{header}`", path.display())));
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() == width {
                Ok((i + 2, cols))
            } else {
                Err(CliError::Io(format!("{}:{}: expected {width} columns", path.display(), i + 2)))
            }
        })
        .collect()
}

/// Rebuild evaluation reports from the CSV files of an earlier `run`.
pub fn read_report_dir(dir: &Path) -> Result<Vec<EvalReport>, CliError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map(|t| (t, p.clone())).map_err(|e| CliError::Io(format!("cannot read {}: {e}", p.display())))
    };
    let (runs_text, runs_path) = read("report.csv")?;
    let (conf_text, conf_path) = read("confusion.csv")?;
    let bad = |p: &Path, line: usize| CliError::Io(format!("{}:{line}: malformed row", p.display()));

    let mut reports: Vec<EvalReport> = Vec::new();
    let cell = |pipeline: &str, condition: Condition, reports: &mut Vec<EvalReport>| -> usize {
        if let Some(i) = reports.iter().position(|r| r.pipeline == pipeline && r.condition == Some(condition)) {
            return i;
        }
        reports.push(EvalReport {
            pipeline: pipeline.to_string(),
            condition: Some(condition),
            runs: Vec::new(),
            mean: f64::NAN,
            std: f64::NAN,
            n_invalid: 0,
            confusion: [[0; N_CLASSES]; N_CLASSES],
            chance_level: CHANCE_LEVEL,
            config: String::new(),
            warnings: Vec::new(),
        });
        reports.len() - 1
    };

    for (line, c) in csv_rows(&runs_text, "pipeline,condition,repeat,fold,accuracy,n_test,valid", &runs_path)? {
        let condition = parse_condition(c[1]).ok_or_else(|| bad(&runs_path, line))?;
        let parsed = (|| {
            let accuracy = if c[4].is_empty() { None } else { Some(c[4].parse::<f64>().ok()?) };
            Some(RunResult {
                repeat: c[2].parse().ok()?,
                fold: c[3].parse().ok()?,
                n_test: c[5].parse().ok()?,
                accuracy,
                error: (c[6] != "true").then(|| "failed".to_string()),
                predictions: Vec::new(),
            })
        })()
        .ok_or_else(|| bad(&runs_path, line))?;
        let i = cell(c[0], condition, &mut reports);
        reports[i].runs.push(parsed);
    }
    for (line, c) in csv_rows(&conf_text, "pipeline,condition,true,predicted,count,rate", &conf_path)? {
        let condition = parse_condition(c[1]).ok_or_else(|| bad(&conf_path, line))?;
        let (t, p) = parse_class(c[2]).zip(parse_class(c[3])).ok_or_else(|| bad(&conf_path, line))?;
        let n: u64 = c[4].parse().map_err(|_| bad(&conf_path, line))?;
        let i = cell(c[0], condition, &mut reports);
        reports[i].confusion[t.index()][p.index()] = n;
    }
    for r in &mut reports {
        let accs: Vec<f64> = r.runs.iter().filter_map(|x| x.accuracy).collect();
        r.n_invalid = r.runs.len() - accs.len();
        if !accs.is_empty() {
            let m = accs.iter().sum::<f64>() / accs.len() as f64;
            let v = accs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / accs.len() as f64;
            r.mean = m;
            r.std = v.sqrt();
        }
    }
    if reports.is_empty() {
        return Err(CliError::Io(format!("{} holds no results", runs_path.display())));
    }
    Ok(reports)
}

/// Re-render the table of an earlier `run` from its CSV files.
pub fn cmd_report(dir: &Path) -> Result<String, CliError> {
    let reports = read_report_dir(dir)?;
    let table = render_report(&reports)?.table;
    print!("{table}");
    Ok(table)
}
