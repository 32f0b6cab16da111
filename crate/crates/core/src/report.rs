//! Machine-readable run outputs: the per-block CSV, JSON summaries and cloud
//! dumps. Float text is the shortest decimal that round-trips.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::{BlockRecord, BuildReport, EpsilonSchedule, StopReason};
use crate::measures::ParticleCloud;

pub const BLOCK_CSV_HEADER: &str = "m,epsilon,mmd_sq,delta,delta1,delta2,lip_bound";

/// Shortest round-trip decimal; scientific notation outside `[1e-5, 1e16)`.
pub fn format_float(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn block_csv(rows: &[BlockRecord]) -> String {
    let mut s = String::from(BLOCK_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let cols = [
            r.m.to_string(),
            format_float(r.epsilon),
            format_float(r.mmd_sq),
            format_float(r.delta),
            format_float(r.delta1),
            format_float(r.delta2),
            format_float(r.lip_bound),
        ];
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    s
}

/// Headerless CSV, one particle per line.
pub fn cloud_csv(cloud: &ParticleCloud) -> String {
    let mut s = String::with_capacity(cloud.as_slice().len() * 24);
    for p in cloud.points() {
        let cols: Vec<String> = p.iter().map(|x| format_float(*x)).collect();
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    s
}

/// Summary of one `build` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub n_used: usize,
    pub n_scheduled: usize,
    pub initial_mmd_sq: f64,
    pub final_mmd_sq: f64,
    pub achieved_ratio: f64,
    pub target_delta: f64,
    pub target_met: bool,
    pub stop: StopReason,
    /// Absent when the initial witness already vanished.
    pub schedule: Option<EpsilonSchedule>,
    pub safety_c: Option<f64>,
    pub attempts: usize,
    pub max_lip_bound: f64,
    pub seed: u64,
    pub n_particles: usize,
}

impl RunSummary {
    pub fn from_report(report: &BuildReport, safety_c: Option<f64>, attempts: usize, seed: u64, n: usize) -> Self {
        Self {
            n_used: report.n_used(),
            n_scheduled: report.schedule.n_blocks(),
            initial_mmd_sq: report.initial_mmd_sq,
            final_mmd_sq: report.final_mmd_sq,
            achieved_ratio: report.achieved_ratio,
            target_delta: report.schedule.delta(),
            target_met: report.target_met,
            stop: report.stop,
            schedule: Some(report.schedule),
            safety_c,
            attempts,
            max_lip_bound: report.rows.iter().map(|r| r.lip_bound).fold(0.0, f64::max),
            seed,
            n_particles: n,
        }
    }
}

/// One `sweep` row: a fresh construction for one target ratio and schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub schedule: String,
    pub n_predicted: Option<usize>,
    pub n_used: Option<usize>,
    pub epsilon: Option<f64>,
    pub safety_c: Option<f64>,
    pub attempts: Option<usize>,
    pub initial_mmd_sq: Option<f64>,
    pub final_mmd_sq: Option<f64>,
    pub achieved_ratio: Option<f64>,
    pub target_met: bool,
    pub error: Option<String>,
}

pub const SWEEP_CSV_HEADER: &str =
    "delta,schedule,n_predicted,n_used,epsilon,safety_c,attempts,initial_mmd_sq,final_mmd_sq,achieved_ratio,target_met,error";

fn opt<T>(v: Option<T>, f: impl Fn(T) -> String) -> String {
    v.map(f).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let cols = [
            format_float(r.delta),
            r.schedule.clone(),
            opt(r.n_predicted, |n| n.to_string()),
            opt(r.n_used, |n| n.to_string()),
            opt(r.epsilon, format_float),
            opt(r.safety_c, format_float),
            opt(r.attempts, |n| n.to_string()),
            opt(r.initial_mmd_sq, format_float),
            opt(r.final_mmd_sq, format_float),
            opt(r.achieved_ratio, format_float),
            r.target_met.to_string(),
            csv_field(r.error.as_deref().unwrap_or("")),
        ];
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    s
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}
