//! Append-only CSV streams.
//!
//! `metrics.csv`, one row per epoch:
//! `epoch, phase, cycle, loss, accuracy, regularizer, eval_loss,
//! eval_accuracy, eval_accuracy_binary, param_ratio, flop_ratio`, then
//! `score_mean:<layer>` and `kept:<layer>` for every prunable layer. Cells
//! that do not apply to a phase are empty.
//!
//! `refinement.csv`, one row per block after every pruning-stage phase:
//! `cycle, phase, block, ratio_unscaled, ratio_scaled, delta, eps,
//! lower_bound, upper_bound, violation, bound_factor, unsquared_violation`.
//!
//! Floats are written in shortest round-trip form, so identical runs give
//! identical files.

use filterprune::analysis::RefinementRecord;
use filterprune::schedule::{MetricRow, MetricsSink, Phase};
use std::cell::Cell;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", .path.display())]
    Format { path: PathBuf, message: String },
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const REFINEMENT_FILE: &str = "refinement.csv";

pub const REFINEMENT_HEADER: [&str; 12] = [
    "cycle",
    "phase",
    "block",
    "ratio_unscaled",
    "ratio_scaled",
    "delta",
    "eps",
    "lower_bound",
    "upper_bound",
    "violation",
    "bound_factor",
    "unsquared_violation",
];

pub fn metrics_header(layers: &[String]) -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "phase",
        "cycle",
        "loss",
        "accuracy",
        "regularizer",
        "eval_loss",
        "eval_accuracy",
        "eval_accuracy_binary",
        "param_ratio",
        "flop_ratio",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(layers.iter().map(|l| format!("score_mean:{l}")));
    h.extend(layers.iter().map(|l| format!("kept:{l}")));
    h
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One CSV file opened for appending after its first `keep` data rows.
pub struct CsvStream {
    path: PathBuf,
    writer: csv::Writer<File>,
    width: usize,
    rows: Rc<Cell<usize>>,
}

impl CsvStream {
    /// Opens `path`, keeping the header and the first `keep` data rows and
    /// discarding the rest; creates the file if it does not exist yet.
    pub fn open(path: &Path, header: &[String], keep: usize) -> Result<Self, MetricsError> {
        let io = |source| MetricsError::Io {
            path: path.into(),
            source,
        };
        let head_line = header.join(",");
        let mut kept = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            let mut lines = reader.lines();
            match lines.next().transpose().map_err(io)? {
                Some(h) if h == head_line => {}
                Some(_) => {
                    return Err(MetricsError::Format {
                        path: path.into(),
                        message: "header does not match this run's layers".into(),
                    })
                }
                None => {}
            }
            for line in lines.take(keep) {
                kept.push(line.map_err(io)?);
            }
        }
        if kept.len() < keep {
            return Err(MetricsError::Format {
                path: path.into(),
                message: format!("expected at least {keep} rows, found {}", kept.len()),
            });
        }
        let mut text = head_line;
        text.push('\n');
        for l in &kept {
            text.push_str(l);
            text.push('\n');
        }
        fs::write(path, text).map_err(io)?;
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        Ok(Self {
            path: path.into(),
            writer: csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(file),
            width: header.len(),
            rows: Rc::new(Cell::new(keep)),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows.get()
    }

    /// Live view of the row count, readable while the stream is borrowed.
    pub fn counter(&self) -> Rc<Cell<usize>> {
        Rc::clone(&self.rows)
    }

    pub fn append(&mut self, cells: &[String]) -> Result<(), MetricsError> {
        if cells.len() != self.width {
            return Err(MetricsError::Format {
                path: self.path.clone(),
                message: format!("row of {} cells for {} columns", cells.len(), self.width),
            });
        }
        let err = |e: csv::Error| MetricsError::Format {
            path: self.path.clone(),
            message: e.to_string(),
        };
        self.writer.write_record(cells).map_err(err)?;
        self.writer.flush().map_err(|source| MetricsError::Io {
            path: self.path.clone(),
            source,
        })?;
        self.rows.set(self.rows.get() + 1);
        Ok(())
    }
}

/// Epoch rows to `metrics.csv`.
pub struct CsvMetrics {
    pub stream: CsvStream,
    layers: usize,
}

impl CsvMetrics {
    pub fn open(dir: &Path, layers: &[String], keep: usize) -> Result<Self, MetricsError> {
        Ok(Self {
            stream: CsvStream::open(&dir.join(METRICS_FILE), &metrics_header(layers), keep)?,
            layers: layers.len(),
        })
    }

    fn cells(&self, r: &MetricRow) -> Vec<String> {
        let mut c = vec![
            r.epoch.to_string(),
            r.phase.to_string(),
            opt(r.cycle),
            r.loss.to_string(),
            r.accuracy.to_string(),
            opt(r.regularizer),
            r.eval_loss.to_string(),
            r.eval_accuracy.to_string(),
            opt(r.eval_accuracy_binary),
            r.param_ratio.to_string(),
            r.flop_ratio.to_string(),
        ];
        let pad = |v: Vec<String>| -> Vec<String> {
            if v.is_empty() {
                vec![String::new(); self.layers]
            } else {
                v
            }
        };
        c.extend(pad(r.mean_scores.iter().map(f64::to_string).collect()));
        c.extend(pad(r.popcounts.iter().map(usize::to_string).collect()));
        c
    }
}

impl MetricsSink for CsvMetrics {
    fn record(&mut self, row: &MetricRow) -> filterprune::Result<()> {
        let cells = self.cells(row);
        self.stream
            .append(&cells)
            .map_err(|e| filterprune::Error::Config(e.to_string()))
    }
}

/// Block records to `refinement.csv`.
pub struct RefinementLog {
    pub stream: CsvStream,
}

impl RefinementLog {
    pub fn open(dir: &Path, keep: usize) -> Result<Self, MetricsError> {
        let header: Vec<String> = REFINEMENT_HEADER.iter().map(|s| s.to_string()).collect();
        Ok(Self {
            stream: CsvStream::open(&dir.join(REFINEMENT_FILE), &header, keep)?,
        })
    }

    pub fn append(
        &mut self,
        cycle: usize,
        phase: Phase,
        records: &[RefinementRecord],
    ) -> Result<(), MetricsError> {
        for r in records {
            self.stream.append(&[
                cycle.to_string(),
                phase.to_string(),
                r.block_id.clone(),
                r.ratio_unscaled.to_string(),
                r.ratio_scaled.to_string(),
                r.delta.to_string(),
                r.eps.to_string(),
                r.lower_bound.to_string(),
                r.upper_bound.to_string(),
                r.violation.to_string(),
                r.bound_factor.to_string(),
                r.unsquared_violation.to_string(),
            ])?;
        }
        Ok(())
    }
}

/// `(epoch, phase, eval_accuracy)` for the first `limit` rows of a metrics file.
pub fn accuracy_trajectory(
    path: &Path,
    limit: usize,
) -> Result<Vec<(usize, String, f64)>, MetricsError> {
    let fmt = |message: String| MetricsError::Format {
        path: path.into(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
    let mut out = Vec::new();
    for rec in reader.records().take(limit) {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let epoch = rec[0]
            .parse()
            .map_err(|_| fmt(format!("bad epoch {}", &rec[0])))?;
        let acc = rec[7]
            .parse()
            .map_err(|_| fmt(format!("bad accuracy {}", &rec[7])))?;
        out.push((epoch, rec[1].to_string(), acc));
    }
    Ok(out)
}

/// Totals over the first `limit` rows of a refinement file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RefinementSummary {
    pub records: usize,
    pub violations: usize,
    pub unsquared_violations: usize,
}

pub fn refinement_summary(path: &Path, limit: usize) -> Result<RefinementSummary, MetricsError> {
    let fmt = |message: String| MetricsError::Format {
        path: path.into(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
    let mut s = RefinementSummary::default();
    for rec in reader.records().take(limit) {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        s.records += 1;
        s.violations += (&rec[9] == "true") as usize;
        s.unsquared_violations += (&rec[11] == "true") as usize;
    }
    Ok(s)
}

/// Eval accuracy against epoch, one colour per phase.
pub fn accuracy_chart_svg(points: &[(usize, String, f64)]) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let max_e = points.iter().map(|p| p.0).max().unwrap_or(0).max(1) as f64;
    let x = |e: usize| pad + (w - 2.0 * pad) * e as f64 / max_e;
    let y = |a: f64| h - pad - (h - 2.0 * pad) * a.clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r##"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="#444"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="#444"/>"##,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch</text>"#,
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" font-size="12" transform="rotate(-90 12 {})">eval accuracy</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (phase, colour) in [
        ("warmup", "#1f77b4"),
        ("score", "#ff7f0e"),
        ("weight", "#2ca02c"),
        ("finetune", "#d62728"),
    ] {
        let pts: Vec<String> = points
            .iter()
            .filter(|p| p.1 == phase)
            .map(|p| format!("{:.1},{:.1}", x(p.0), y(p.2)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"><title>{phase}</title></polyline>"#,
                pts.join(" ")
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
