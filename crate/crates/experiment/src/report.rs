//! Curves and a markdown table regenerated from `summary.json`.

use std::fs;
use std::path::{Path, PathBuf};

use cvt_core::evaluation::Protocol;
use plotters::prelude::*;

use crate::error::ExperimentError;
use crate::runner::SUMMARY_FILE;
use crate::summary::{MethodSummary, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Forgetting,
}

impl Metric {
    fn as_str(&self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Forgetting => "forgetting",
        }
    }
}

/// Mean `(task, value)` points of one method's curve; undefined values
/// (such as forgetting after the first task) are left out.
pub fn curve(method: &MethodSummary, protocol: Protocol, metric: Metric) -> Vec<(usize, f64)> {
    let Some(p) = method.protocol(protocol) else {
        return Vec::new();
    };
    p.per_boundary
        .iter()
        .filter_map(|b| match metric {
            Metric::Accuracy => Some((b.task, b.accuracy.mean)),
            Metric::Forgetting => b.forgetting.as_ref().map(|f| (b.task, f.mean)),
        })
        .collect()
}

/// Columns: method, #paras, task-free A_T, task-aware A_T, F_T.
pub fn markdown_table(summary: &Summary) -> String {
    let forgetting_protocol = if summary.methods.iter().any(|m| m.protocol(Protocol::TaskFree).is_some()) {
        Protocol::TaskFree
    } else {
        Protocol::TaskAware
    };
    let cell = |m: &MethodSummary, p: Protocol| {
        m.protocol(p)
            .map(|s| s.overall_accuracy.display())
            .unwrap_or_else(|| "n/a".into())
    };
    let mut out = String::from("| method | #paras | task-free A_T | task-aware A_T | F_T |\n");
    out.push_str("|---|---:|---:|---:|---:|\n");
    for m in &summary.methods {
        let f = m
            .protocol(forgetting_protocol)
            .and_then(|s| s.forgetting.as_ref())
            .map(|s| s.display())
            .unwrap_or_else(|| "n/a".into());
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            m.method,
            m.parameters,
            cell(m, Protocol::TaskFree),
            cell(m, Protocol::TaskAware),
            f
        ));
    }
    out.push_str(&format!(
        "\nMean ± standard deviation over seeds {:?}. F_T uses the {} protocol.\n",
        summary.config.seeds, forgetting_protocol
    ));
    out
}

fn plot(summary: &Summary, protocol: Protocol, metric: Metric, path: &Path) -> Result<(), ExperimentError> {
    let curves: Vec<(String, Vec<(usize, f64)>)> = summary
        .methods
        .iter()
        .map(|m| (m.method.to_string(), curve(m, protocol, metric)))
        .collect();
    let tasks = summary.config.num_tasks.max(2);
    let values = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.1));
    let (lo, hi) = match metric {
        Metric::Accuracy => (0.0, 100.0),
        Metric::Forgetting => {
            let (lo, hi) = values.fold((0.0f64, 1.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
            (lo - 1.0, hi + 1.0)
        }
    };
    let err = |e: &dyn std::fmt::Display| ExperimentError::Report(format!("{}: {e}", path.display()));
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} ({protocol})", metric.as_str()), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(1f64..tasks as f64, lo..hi)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("tasks observed")
        .y_desc(metric.as_str())
        .x_labels(tasks)
        .x_label_formatter(&|x| format!("{x:.0}"))
        .draw()
        .map_err(|e| err(&e))?;
    for (i, (name, points)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = points.iter().map(|&(t, v)| (t as f64, v)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// Files written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub plots: Vec<PathBuf>,
}

pub fn load_summary(dir: &Path) -> Result<Summary, ExperimentError> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| ExperimentError::Report(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `report.md` and one SVG per (protocol, metric) into `dir`.
pub fn emit_report(dir: &Path) -> Result<ReportFiles, ExperimentError> {
    let summary = load_summary(dir)?;
    if summary.methods.is_empty() {
        return Err(ExperimentError::Report("summary holds no completed runs".into()));
    }
    let protocols: Vec<Protocol> = Protocol::ALL
        .into_iter()
        .filter(|p| summary.methods.iter().any(|m| m.protocol(*p).is_some()))
        .collect();
    let mut plots = Vec::new();
    for protocol in protocols {
        for metric in [Metric::Accuracy, Metric::Forgetting] {
            let path = dir.join(format!("{}_{protocol}.svg", metric.as_str()));
            plot(&summary, protocol, metric, &path)?;
            plots.push(path);
        }
    }
    let table = dir.join("report.md");
    fs::write(&table, format!("# Results\n\n{}", markdown_table(&summary)))?;
    Ok(ReportFiles { table, plots })
}
