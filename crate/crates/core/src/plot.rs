//! Long-format `series,x,y` tables for offline plotting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{LdsReport, RemovalReport, ScalingSweep};
use crate::io::fmt_f64;

/// Points along the fitted curve in an LDS-vs-K table.
const FIT_POINTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "report", rename_all = "kebab-case")]
pub enum Report {
    Lds(LdsReport),
    Removal(RemovalReport),
    LdsSweep(ScalingSweep),
}

/// A report as written to disk, tagged with the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportArtifact {
    pub config_digest: String,
    #[serde(flatten)]
    pub report: Report,
}

impl ReportArtifact {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::input(format!("unrecognized report: {e}")))
    }
}

fn row(out: &mut String, series: &str, x: f64, y: f64) {
    let _ = writeln!(out, "{series},{},{}", fmt_f64(x), fmt_f64(y));
}

pub fn emit_plot_data(report: &Report) -> String {
    let mut out = String::from("series,x,y\n");
    match report {
        Report::Lds(r) => {
            for q in &r.per_query {
                row(&mut out, "lds", q.query_id as f64, q.lds);
            }
        }
        Report::Removal(r) => {
            for p in &r.rows {
                row(&mut out, "daunce", p.interval as f64, p.metric_mean);
            }
            for p in &r.rows {
                row(&mut out, "random", p.interval as f64, p.random_baseline_mean);
            }
        }
        Report::LdsSweep(s) => {
            for p in &s.points {
                row(&mut out, "lds", p.k as f64, p.mean_lds);
            }
            if let (Some(fit), Some(first), Some(last)) = (&s.fit, s.points.first(), s.points.last()) {
                let (lo, hi) = (first.k as f64, last.k as f64);
                for i in 0..FIT_POINTS {
                    let x = lo + (hi - lo) * i as f64 / (FIT_POINTS - 1) as f64;
                    row(&mut out, "fit", x, fit.predict(x));
                }
            }
        }
    }
    out
}
