//! Text and CSV rendering of evaluation results.

use std::fmt::Write as _;

use crate::domain::{Condition, TextureClass, N_CLASSES};
use crate::error::{Error, Result};
use crate::eval::EvalReport;

/// Published four-class averages, `(pipeline, condition, accuracy)`. They
/// come from human recordings and are shown for orientation only.
pub const REFERENCE_ACCURACY: [(&str, Condition, f64); 4] = [
    ("csp-lda", Condition::ActualTouch, 0.5332),
    ("eegnet", Condition::ActualTouch, 0.6506),
    ("csp-lda", Condition::TouchImagery, 0.4282),
    ("eegnet", Condition::TouchImagery, 0.4670),
];

pub const REFERENCE_LABEL: &str =
    "Published reference (not reproducible without original recordings)";

const PIPELINE_ORDER: [&str; 2] = ["csp-lda", "eegnet"];
const CONDITION_ORDER: [Condition; 2] = [Condition::ActualTouch, Condition::TouchImagery];

pub fn pipeline_title(id: &str) -> &str {
    match id {
        "csp-lda" => "CSP-LDA",
        "eegnet" => "EEGNet",
        other => other,
    }
}

/// `"0.5000 (±0.0000)"`.
pub fn format_cell(mean: f64, std: f64) -> String {
    if mean.is_finite() {
        format!("{mean:.4} (±{std:.4})")
    } else {
        "invalid".to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedReport {
    pub table: String,
    pub report_csv: String,
    pub confusion_csv: String,
}

fn condition_tag(c: Option<Condition>) -> &'static str {
    c.map_or("unknown", Condition::tag)
}

fn pad(s: &str, width: usize) -> String {
    let n = s.chars().count();
    if n >= width {
        format!("{s}  ")
    } else {
        format!("{s}{}", " ".repeat(width - n))
    }
}

/// Accuracy table laid out as pipelines by conditions, the reference
/// footnote, row-normalised confusion matrices, and the two CSV files.
pub fn render_report(reports: &[EvalReport]) -> Result<RenderedReport> {
    if reports.is_empty() {
        return Err(Error::Empty("no reports to render".into()));
    }
    let mut pipelines: Vec<&str> = PIPELINE_ORDER
        .iter()
        .copied()
        .filter(|p| reports.iter().any(|r| r.pipeline == *p))
        .collect();
    for r in reports {
        if !pipelines.contains(&r.pipeline.as_str()) {
            pipelines.push(&r.pipeline);
        }
    }
    let conditions: Vec<Condition> = CONDITION_ORDER
        .iter()
        .copied()
        .filter(|c| reports.iter().any(|r| r.condition == Some(*c)))
        .collect();
    let find = |p: &str, c: Condition| {
        reports
            .iter()
            .find(|r| r.pipeline == p && r.condition == Some(c))
    };

    let (w0, w) = (12, 22);
    let mut t = String::new();
    let runs = reports.iter().map(|r| r.runs.len()).max().unwrap_or(0);
    let _ = writeln!(t, "4-class classification accuracy, mean (±std) over {runs} cross-validation runs");
    let _ = writeln!(t);
    t.push_str(&pad("Pipeline", w0));
    for c in &conditions {
        t.push_str(&pad(c.title(), w));
    }
    t.push('\n');
    for p in &pipelines {
        t.push_str(&pad(pipeline_title(p), w0));
        for c in &conditions {
            let cell = find(p, *c).map_or("n/a".to_string(), |r| format_cell(r.mean, r.std));
            t.push_str(&pad(&cell, w));
        }
        t.push('\n');
    }
    let _ = writeln!(t);
    let _ = writeln!(t, "Chance level: {:.2}", reports[0].chance_level);
    for r in reports {
        if r.n_invalid > 0 {
            let _ = writeln!(
                t,
                "{} / {}: {} invalid run(s) excluded",
                pipeline_title(&r.pipeline),
                condition_tag(r.condition),
                r.n_invalid
            );
        }
        for w in &r.warnings {
            let _ = writeln!(t, "warning ({} / {}): {w}", pipeline_title(&r.pipeline), condition_tag(r.condition));
        }
    }
    let _ = writeln!(t);
    let _ = writeln!(t, "* {REFERENCE_LABEL}:");
    for p in PIPELINE_ORDER {
        t.push_str(&pad(&format!("  {}", pipeline_title(p)), w0));
        for c in CONDITION_ORDER {
            let v = REFERENCE_ACCURACY
                .iter()
                .find(|(rp, rc, _)| *rp == p && *rc == c)
                .map(|x| x.2)
                .expect("reference covers every cell");
            t.push_str(&pad(&format!("{} {v:.4}", c.title()), w));
        }
        t.push('\n');
    }

    for r in reports {
        let _ = writeln!(t);
        let _ = writeln!(
            t,
            "Confusion (row-normalised), {} / {}",
            pipeline_title(&r.pipeline),
            r.condition.map_or("unknown", Condition::title)
        );
        t.push_str(&pad("true\\pred", w0));
        for c in TextureClass::ALL {
            t.push_str(&pad(c.name(), 8));
        }
        t.push('\n');
        for (c, row) in TextureClass::ALL.iter().zip(r.normalized_confusion()) {
            t.push_str(&pad(c.name(), w0));
            match row {
                Some(v) => v.iter().for_each(|x| t.push_str(&pad(&format!("{x:.3}"), 8))),
                None => t.push_str("(no support)"),
            }
            t.push('\n');
        }
    }

    let mut report_csv = String::from("pipeline,condition,repeat,fold,accuracy,n_test,valid\n");
    let mut confusion_csv = String::from("pipeline,condition,true,predicted,count,rate\n");
    for r in reports {
        let cond = condition_tag(r.condition);
        for run in &r.runs {
            let acc = run.accuracy.map_or(String::new(), |a| a.to_string());
            let _ = writeln!(
                report_csv,
                "{},{cond},{},{},{acc},{},{}",
                r.pipeline,
                run.repeat,
                run.fold,
                run.n_test,
                run.is_valid()
            );
        }
        let norm = r.normalized_confusion();
        for ti in 0..N_CLASSES {
            for pi in 0..N_CLASSES {
                let rate = norm[ti].map_or(String::new(), |row| row[pi].to_string());
                let _ = writeln!(
                    confusion_csv,
                    "{},{cond},{},{},{},{rate}",
                    r.pipeline,
                    TextureClass::ALL[ti].name(),
                    TextureClass::ALL[pi].name(),
                    r.confusion[ti][pi]
                );
            }
        }
    }
    Ok(RenderedReport {
        table: t,
        report_csv,
        confusion_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{RunResult, CHANCE_LEVEL};

    fn report(pipeline: &str, condition: Condition, accs: &[f64]) -> EvalReport {
        let runs: Vec<RunResult> = accs
            .iter()
            .enumerate()
            .map(|(i, a)| RunResult {
                repeat: i / 5,
                fold: i % 5,
                n_test: 40,
                accuracy: Some(*a),
                error: None,
                predictions: Vec::new(),
            })
            .collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let mut confusion = [[0u64; 4]; 4];
        confusion[0][0] = 3;
        confusion[0][1] = 1;
        EvalReport {
            pipeline: pipeline.into(),
            condition: Some(condition),
            runs,
            mean,
            std: 0.0,
            n_invalid: 0,
            confusion,
            chance_level: CHANCE_LEVEL,
            config: String::new(),
            warnings: Vec::new(),
        }
    }

    #[test]
    fn zero_variance_cell_format() {
        assert_eq!(format_cell(0.5, 0.0), "0.5000 (±0.0000)");
        assert_eq!(format_cell(f64::NAN, f64::NAN), "invalid");
    }

    #[test]
    fn table_and_csv_layout() {
        let reports = vec![
            report("eegnet", Condition::TouchImagery, &[0.5; 25]),
            report("csp-lda", Condition::ActualTouch, &[0.5; 25]),
        ];
        let r = render_report(&reports).unwrap();
        assert!(r.table.contains("0.6506"));
        assert!(r.table.contains(REFERENCE_LABEL));
        assert!(r.table.contains("0.5000 (±0.0000)"));
        assert!(r.table.contains("n/a"));
        let csp_line = r.table.lines().find(|l| l.starts_with("CSP-LDA")).unwrap();
        assert!(csp_line.find("0.5000").unwrap() < csp_line.find("n/a").unwrap());
        assert_eq!(r.report_csv.lines().count(), 1 + 50);
        assert_eq!(r.confusion_csv.lines().count(), 1 + 32);
        assert!(r.confusion_csv.contains("csp-lda,touch,Fabric,Glass,1,0.25\n"));
        assert!(r.confusion_csv.contains("csp-lda,touch,Glass,Glass,0,\n"));
        assert!(render_report(&[]).is_err());
    }
}
