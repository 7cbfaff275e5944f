//! Output formats of the harness and their readers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::write_atomic;

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub sample: usize,
    pub label: usize,
    pub success: bool,
    pub iterations_used: usize,
    pub adversarial_label: usize,
    pub adversarial_confidence: f64,
    pub single_step_flip: bool,
    pub initial_peak: f64,
    pub final_peak: f64,
    pub final_sigmas: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub model: String,
    pub mode: String,
    pub evaluated: usize,
    pub attacked: usize,
    pub successes: usize,
    pub error_rate: f64,
    pub single_step_rate: f64,
    pub mean_iters: f64,
    /// Share of successful attacks whose adversarial confidence is below 0.1.
    pub low_confidence_fraction: f64,
    pub denominator: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub axis: String,
    pub value: f64,
    /// `None` marks a failed sub-run.
    pub stats: Option<SweepStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepStats {
    pub error_rate: f64,
    pub single_step_rate: f64,
    pub mean_iters: f64,
    pub n: usize,
}

pub const SWEEP_HEADER: &str = "model,axis,value,error_rate,single_step_rate,mean_iters,n";
pub const DENOMINATOR_NOTE: &str = "rates are over attacked samples, which are the originally correctly classified ones";

/// One row per evaluated input during an attack.
pub const ATTACK_TRACE_HEADER: &str = "iteration,confidence,peak";

pub const MANIFOLD_SUMMARY_HEADER: &str =
    "sample,label,origin_class,crossings,attains_other_class,sigma0_low,sigma0_high,plane_pass,points,line_deviation";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldRow {
    pub sample: usize,
    pub label: usize,
    pub origin_class: usize,
    pub crossings: usize,
    pub attains_other_class: bool,
    pub sigma0_low: f64,
    pub sigma0_high: f64,
    pub plane_pass: usize,
    pub points: usize,
    /// Only defined for rank-1 inputs.
    pub line_deviation: Option<f64>,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn results_to_jsonl(records: &[AttackRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_results(path: &Path) -> Result<Vec<AttackRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("results line: {e}"))))
        .collect()
}

pub fn read_attack_summary(path: &Path) -> Result<AttackSummary> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format(e.to_string()))
}

pub fn attack_trace_to_csv(confidence: &[f64], peak: &[f64]) -> String {
    let mut out = format!("{ATTACK_TRACE_HEADER}\n");
    for (i, (c, p)) in confidence.iter().zip(peak).enumerate() {
        out.push_str(&format!("{i},{c},{p}\n"));
    }
    out
}

/// Returns `(confidence_trace, peak_trace)`.
pub fn read_attack_trace(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(ATTACK_TRACE_HEADER) {
        return Err(Error::Format("missing attack trace header".into()));
    }
    let mut conf = Vec::new();
    let mut peak = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Format(format!("bad attack trace row '{line}'")));
        }
        conf.push(parse_f64(f[1])?);
        peak.push(parse_f64(f[2])?);
    }
    Ok((conf, peak))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Format(format!("bad number '{s}'")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::Format(format!("bad count '{s}'")))
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("# {DENOMINATOR_NOTE}\n{SWEEP_HEADER}\n");
    for r in rows {
        match r.stats {
            Some(s) => out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.model, r.axis, r.value, s.error_rate, s.single_step_rate, s.mean_iters, s.n
            )),
            None => out.push_str(&format!("{},{},{},failed,failed,failed,0\n", r.model, r.axis, r.value)),
        }
    }
    out
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(Error::Format("missing sweep header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("bad sweep row '{line}'")));
            }
            let stats = if f[3] == "failed" {
                None
            } else {
                Some(SweepStats {
                    error_rate: parse_f64(f[3])?,
                    single_step_rate: parse_f64(f[4])?,
                    mean_iters: parse_f64(f[5])?,
                    n: parse_usize(f[6])?,
                })
            };
            Ok(SweepRow {
                model: f[0].to_string(),
                axis: f[1].to_string(),
                value: parse_f64(f[2])?,
                stats,
            })
        })
        .collect()
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    parse_sweep_csv(&fs::read_to_string(path)?)
}

fn opt_to_string(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn manifold_summary_to_csv(rows: &[ManifoldRow]) -> String {
    let mut out = format!("{MANIFOLD_SUMMARY_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.sample,
            r.label,
            r.origin_class,
            r.crossings,
            r.attains_other_class,
            r.sigma0_low,
            r.sigma0_high,
            r.plane_pass,
            r.points,
            opt_to_string(r.line_deviation)
        ));
    }
    out
}

pub fn parse_manifold_summary(text: &str) -> Result<Vec<ManifoldRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFOLD_SUMMARY_HEADER) {
        return Err(Error::Format("missing manifold summary header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::Format(format!("bad manifold row '{line}'")));
            }
            Ok(ManifoldRow {
                sample: parse_usize(f[0])?,
                label: parse_usize(f[1])?,
                origin_class: parse_usize(f[2])?,
                crossings: parse_usize(f[3])?,
                attains_other_class: f[4]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad flag '{}'", f[4])))?,
                sigma0_low: parse_f64(f[5])?,
                sigma0_high: parse_f64(f[6])?,
                plane_pass: parse_usize(f[7])?,
                points: parse_usize(f[8])?,
                line_deviation: if f[9].is_empty() { None } else { Some(parse_f64(f[9])?) },
            })
        })
        .collect()
}

pub fn read_manifold_summary(path: &Path) -> Result<Vec<ManifoldRow>> {
    parse_manifold_summary(&fs::read_to_string(path)?)
}
