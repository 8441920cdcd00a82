//! Entropy curves and top-disease confidence from benchmark runs, written as
//! diff-stable CSV (fixed columns, six decimals) plus a text summary.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::prob::DiseaseDistribution;
use crate::sim::{carry_forward, BenchmarkRun};

pub const ENTROPY_CSV: &str = "entropy_curves.csv";
pub const CONFIDENCE_CSV: &str = "confidence.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

#[derive(Debug, thiserror::Error)]
#[error("{path}: {source}")]
pub struct ReportError {
    pub path: PathBuf,
    pub source: io::Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyCurve {
    pub policy: String,
    /// Mean entropy at iterations 0..=T.
    pub values: Vec<f64>,
    pub n: usize,
    /// Cases that ended before T and had their last value carried forward.
    pub carried_forward: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePoint {
    pub iteration: usize,
    pub top1: f64,
    pub top2: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceEvolution {
    pub case_id: String,
    pub points: Vec<ConfidencePoint>,
}

/// Mean entropy per iteration for each policy over the run's horizon. Cases
/// with no entropy values (failed before the first update) are skipped.
pub fn entropy_curves(run: &BenchmarkRun) -> Vec<EntropyCurve> {
    run.policies
        .iter()
        .filter_map(|policy| {
            let traces: Vec<&[f64]> = run
                .outcomes_for(policy)
                .map(|o| o.entropy_trace.as_slice())
                .filter(|t| !t.is_empty())
                .collect();
            mean_curve(policy, &traces, run.horizon)
        })
        .collect()
}

/// Mean of traces padded to `horizon + 1` by carry-forward.
pub fn mean_curve(policy: &str, traces: &[&[f64]], horizon: usize) -> Option<EntropyCurve> {
    if traces.is_empty() {
        return None;
    }
    let mut values = vec![0.0; horizon + 1];
    let mut carried = 0;
    for t in traces {
        let (padded, c) = carry_forward(t, horizon);
        carried += usize::from(c);
        for (v, x) in values.iter_mut().zip(padded) {
            *v += x;
        }
    }
    for v in &mut values {
        *v /= traces.len() as f64;
    }
    Some(EntropyCurve { policy: policy.to_string(), values, n: traces.len(), carried_forward: carried })
}

pub fn confidence_of(dist: &DiseaseDistribution) -> (f64, f64) {
    let e = dist.entries();
    let top1 = e.first().map_or(0.0, |x| x.p);
    let top2 = e.get(1).map_or(0.0, |x| x.p);
    (top1, top2)
}

/// Per-case top-1/top-2 trajectories for the primary policy: `app` when the
/// run has it, otherwise the first policy listed.
pub fn confidence_evolution(run: &BenchmarkRun) -> Vec<ConfidenceEvolution> {
    let Some(policy) = run.policies.iter().find(|p| *p == "app").or_else(|| run.policies.first()) else {
        return Vec::new();
    };
    run.outcomes_for(policy)
        .map(|o| ConfidenceEvolution {
            case_id: o.case_id.clone(),
            points: o
                .distributions
                .iter()
                .enumerate()
                .map(|(iteration, d)| {
                    let (top1, top2) = confidence_of(d);
                    ConfidencePoint { iteration, top1, top2, gap: top1 - top2 }
                })
                .collect(),
        })
        .collect()
}

pub fn entropy_csv(curves: &[EntropyCurve]) -> String {
    let mut out = String::from("policy,iteration,mean_entropy,n\n");
    for c in curves {
        for (t, v) in c.values.iter().enumerate() {
            let _ = writeln!(out, "{},{t},{v:.6},{}", c.policy, c.n);
        }
    }
    out
}

pub fn confidence_csv(evolutions: &[ConfidenceEvolution]) -> String {
    let mut out = String::from("case,iteration,top1,top2,gap\n");
    for e in evolutions {
        for p in &e.points {
            let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6}", e.case_id, p.iteration, p.top1, p.top2, p.gap);
        }
    }
    out
}

pub fn summary(run: &BenchmarkRun, curves: &[EntropyCurve], evolutions: &[ConfidenceEvolution]) -> String {
    let mut out = String::new();
    if curves.is_empty() {
        out.push_str("no data\n");
        return out;
    }
    let _ = writeln!(
        out,
        "benchmark: {} case(s), policies {}, seed {}, horizon {}",
        run.cases.len(),
        run.policies.join(","),
        run.seed,
        run.horizon
    );
    let _ = writeln!(out, "entropy in nats; mean over cases");
    for c in curves {
        let agg = run.aggregates.iter().find(|a| a.policy == c.policy);
        let first = c.values.first().copied().unwrap_or(0.0);
        let last = c.values.last().copied().unwrap_or(0.0);
        let _ = write!(
            out,
            "{:<8} n={:<3} H0={first:.6} H{}={last:.6} reduction={:.6}",
            c.policy,
            c.n,
            c.values.len().saturating_sub(1),
            first - last
        );
        if let Some(a) = agg {
            let _ = write!(
                out,
                " hit_rate={:.6} mean_turns={:.6} failures={}",
                a.hit_rate, a.mean_turns, a.failures
            );
        }
        out.push('\n');
        if c.carried_forward > 0 {
            let _ = writeln!(
                out,
                "         note: {} case(s) ended early; last entropy carried forward",
                c.carried_forward
            );
        }
    }
    if !evolutions.is_empty() {
        let n = evolutions.len() as f64;
        let mean_at = |pick: fn(&ConfidenceEvolution) -> Option<&ConfidencePoint>| {
            evolutions
                .iter()
                .filter_map(pick)
                .map(|p| (p.top1, p.gap))
                .fold((0.0, 0.0), |a, b| (a.0 + b.0 / n, a.1 + b.1 / n))
        };
        let (t0, g0) = mean_at(|e| e.points.first());
        let (t1, g1) = mean_at(|e| e.points.last());
        let _ = writeln!(out, "confidence: mean top1 {t0:.6} -> {t1:.6}, mean gap {g0:.6} -> {g1:.6}");
    }
    out
}

/// Writes the two CSV tables and the summary into `dir`.
pub fn emit_report(
    run: &BenchmarkRun,
    curves: &[EntropyCurve],
    evolutions: &[ConfidenceEvolution],
    dir: &Path,
) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError { path: dir.to_path_buf(), source })?;
    for (name, body) in [
        (ENTROPY_CSV, entropy_csv(curves)),
        (CONFIDENCE_CSV, confidence_csv(evolutions)),
        (SUMMARY_TXT, summary(run, curves, evolutions)),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|source| ReportError { path, source })?;
    }
    Ok(())
}
