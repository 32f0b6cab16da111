//! Config-driven runs behind the command line: `build`, `verify`, `sweep`.
//!
//! Every run draws the source cloud and then the target cloud from one
//! ChaCha8 generator seeded with the config seed. Independent runs (verify
//! trials, sweep rows) use separate streams of that generator, so outputs
//! depend only on the config and the seed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    check_descent, check_first_order_gain, check_lipschitz_bound, check_remainder, taylor_order_fit, BoundCheck, TaylorFit,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::feature_maps::{certify_constants, CertificationReport, FeatureMap};
use crate::flow::{
    block_tolerance, build_first_order, build_flow, invert_cloud, schedule_second_order, BlockRecord, EpsilonSchedule,
    ResidualBlock, ResidualFlow, ScheduleKind, StopReason, LIPSCHITZ_LIMIT,
};
use crate::measures::{psi, sample_with, ParticleCloud};
use crate::report::{self, RunSummary, SweepRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SCHEDULE: i32 = 3;

/// Process exit status for an error that aborted a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Schedule(_) | Error::Lipschitz { .. } => EXIT_SCHEDULE,
        Error::Inversion { .. } | Error::Numeric(_) => EXIT_VERIFICATION,
        Error::Config(_)
        | Error::Certification(_)
        | Error::Input(_)
        | Error::DimensionMismatch { .. }
        | Error::Io(_)
        | Error::Json(_) => EXIT_CONFIG,
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = Some(d.clone());
        }
    }
}

pub fn load_config(path: impl AsRef<Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Builds the configured map and certifies its declared constants.
pub fn certified_map(cfg: &ExperimentConfig) -> Result<(Arc<FeatureMap>, CertificationReport)> {
    let map = cfg.map.build()?;
    let cert = certify_constants(&map, cfg.certify_samples, cfg.seed);
    if !cert.passed {
        return Err(Error::Certification(cert.failures().join("; ")));
    }
    Ok((Arc::new(map), cert))
}

/// Source and target clouds drawn from stream `stream` of the seeded generator.
pub fn sample_pair(cfg: &ExperimentConfig, stream: u64) -> Result<(ParticleCloud, ParticleCloud)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let q = sample_with(&cfg.source, cfg.n_particles, &mut rng)?;
    let p = sample_with(&cfg.target, cfg.n_target(), &mut rng)?;
    Ok((q, p))
}

/// Result of a single flow construction.
#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub flow: ResidualFlow,
    pub summary: RunSummary,
    pub rows: Vec<BlockRecord>,
    pub pushed: ParticleCloud,
}

/// One construction on `(q, p)` with the given schedule kind and target ratio.
pub fn construct(
    cfg: &ExperimentConfig,
    map: &Arc<FeatureMap>,
    q: &ParticleCloud,
    p: &ParticleCloud,
    kind: ScheduleKind,
    delta: f64,
) -> Result<BuildOutcome> {
    let psi0 = psi(p, q, map)?.norm();
    if psi0 <= cfg.stop_tol {
        let initial = psi0 * psi0;
        let summary = RunSummary {
            n_used: 0,
            n_scheduled: 0,
            initial_mmd_sq: initial,
            final_mmd_sq: initial,
            achieved_ratio: 0.0,
            target_delta: delta,
            target_met: true,
            stop: StopReason::WitnessVanished,
            schedule: None,
            safety_c: None,
            attempts: 0,
            max_lip_bound: 0.0,
            seed: cfg.seed,
            n_particles: q.len(),
        };
        return Ok(BuildOutcome {
            flow: ResidualFlow::empty(map.clone()),
            summary,
            rows: Vec::new(),
            pushed: q.clone(),
        });
    }
    let (flow, report, pushed, safety_c, attempts) = match kind {
        ScheduleKind::SecondOrder => {
            let schedule = schedule_second_order(map.constants(), psi0, delta, map.dim_in(), map.dim_out())?;
            let (flow, report, pushed) = build_flow(q, p, map.clone(), &schedule, cfg.stop_tol)?;
            (flow, report, pushed, None, 1)
        }
        ScheduleKind::FirstOrder => {
            let run = build_first_order(q, p, map.clone(), delta, cfg.safety_c, cfg.safety_c_cap, cfg.stop_tol)?;
            (run.flow, run.report, run.pushed, Some(run.safety_c), run.attempts)
        }
    };
    let summary = RunSummary::from_report(&report, safety_c, attempts, cfg.seed, q.len());
    Ok(BuildOutcome {
        flow,
        summary,
        rows: report.rows,
        pushed,
    })
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryFile {
    pub run: RunSummary,
    pub certification: CertificationReport,
}

/// Contents of `clouds.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloudsFile {
    pub source: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
    pub pushed: Vec<Vec<f64>>,
}

/// Runs `build` and writes `report.csv`, `summary.json`, `flow.json`,
/// `source.csv`, `target.csv`, `pushed.csv` and `clouds.json`.
/// Returns the exit status: 0 iff the target ratio was reached.
pub fn cmd_build(cfg: &ExperimentConfig) -> Result<i32> {
    let (map, cert) = certified_map(cfg)?;
    let (q, p) = sample_pair(cfg, 0)?;
    let out = construct(cfg, &map, &q, &p, cfg.schedule, cfg.delta)?;
    let dir = out_dir(cfg)?;
    report::write_text(dir.join("report.csv"), &report::block_csv(&out.rows))?;
    report::write_json(
        dir.join("summary.json"),
        &SummaryFile {
            run: out.summary.clone(),
            certification: cert,
        },
    )?;
    out.flow.save(dir.join("flow.json"))?;
    q.write_csv(dir.join("source.csv"))?;
    p.write_csv(dir.join("target.csv"))?;
    out.pushed.write_csv(dir.join("pushed.csv"))?;
    report::write_json(
        dir.join("clouds.json"),
        &CloudsFile {
            source: q.to_rows(),
            target: p.to_rows(),
            pushed: out.pushed.to_rows(),
        },
    )?;
    Ok(if out.summary.target_met { EXIT_OK } else { EXIT_VERIFICATION })
}

/// Output of the `verify` suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub certification: CertificationReport,
    pub checks: Vec<BoundCheck>,
    pub taylor: Option<TaylorFit>,
    /// Names of failed checks, plus errors that prevented a check from running.
    pub violations: Vec<String>,
    pub passed: bool,
}

fn failed(name: &str, msg: &str, seed: u64) -> (BoundCheck, String) {
    let mut c = BoundCheck::at_least(name, f64::NAN, 0.0, 0.0).with_seed(seed);
    c.satisfied = false;
    (c, format!("{name}: {msg}"))
}

fn trial_checks(cfg: &ExperimentConfig, map: &Arc<FeatureMap>, trial: usize) -> Result<Vec<BoundCheck>> {
    let (q, p) = sample_pair(cfg, trial as u64)?;
    let witness = psi(&p, &q, map)?;
    let psi_norm = witness.norm();
    if psi_norm <= cfg.stop_tol {
        return Ok(Vec::new());
    }
    let schedule = schedule_second_order(map.constants(), psi_norm, cfg.delta, map.dim_in(), map.dim_out())?;
    let eps = cfg.verify.epsilon.unwrap_or(schedule.epsilon());
    let eps_delta = match schedule {
        EpsilonSchedule::SecondOrder { eps_delta, .. } => eps_delta.unwrap_or(f64::INFINITY),
        EpsilonSchedule::FirstOrder { .. } => f64::INFINITY,
    };
    let tag = |c: BoundCheck| c.with_seed(cfg.seed).with_param("trial", trial as f64);
    let mut out = vec![
        tag(check_first_order_gain(&q, &p, map, eps)?),
        tag(check_lipschitz_bound(
            &ResidualBlock::new_unchecked(map.clone(), eps, witness.0)?,
            cfg.verify.lipschitz_pairs,
            cfg.seed.wrapping_add(trial as u64),
        )),
        tag(check_remainder(&q, &p, map, eps)?),
    ];
    if eps <= eps_delta {
        out.push(tag(check_descent(&q, &p, map, eps)?));
    }
    Ok(out)
}

/// Runs the full verification suite; certification failure is an error.
pub fn run_verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    let (map, cert) = certified_map(cfg)?;
    let seed = cfg.seed;
    let mut checks = Vec::new();
    let mut violations = Vec::new();

    let per_trial: Vec<Result<Vec<BoundCheck>>> =
        (0..cfg.verify.trials).into_par_iter().map(|t| trial_checks(cfg, &map, t)).collect();
    for (t, r) in per_trial.into_iter().enumerate() {
        match r {
            Ok(cs) => checks.extend(cs),
            Err(e) => {
                let (c, v) = failed("trial", &format!("trial {t}: {e}"), seed);
                checks.push(c);
                violations.push(v);
            }
        }
    }

    let (q, p) = sample_pair(cfg, 0)?;
    let [lo, hi] = cfg.verify.taylor_slope_range;
    let taylor = if psi(&p, &q, &map)?.norm() <= cfg.stop_tol {
        None
    } else {
        match taylor_order_fit(&q, &p, &map, &cfg.verify.taylor_grid) {
            Ok(fit) => {
                checks.push(BoundCheck::at_least("taylor_slope_min", fit.slope, lo, 0.0).with_seed(seed));
                checks.push(BoundCheck::at_most("taylor_slope_max", fit.slope, hi, 0.0).with_seed(seed));
                Some(fit)
            }
            Err(e) => {
                let (c, v) = failed("taylor_order", &e.to_string(), seed);
                checks.push(c);
                violations.push(v);
                None
            }
        }
    };

    match construct(cfg, &map, &q, &p, cfg.schedule, cfg.delta) {
        Ok(out) => {
            let s = &out.summary;
            checks.push(
                BoundCheck::at_most("target_ratio", s.achieved_ratio, cfg.delta, 0.0)
                    .with_seed(seed)
                    .with_param("n_used", s.n_used as f64),
            );
            let contraction = s.schedule.and_then(|sc| sc.contraction());
            for r in &out.rows {
                checks.push(
                    BoundCheck::at_most("block_lipschitz", r.lip_bound, LIPSCHITZ_LIMIT, 0.0)
                        .with_seed(seed)
                        .with_param("m", r.m as f64),
                );
                if let Some(rate) = contraction {
                    let rhs = rate * r.mmd_sq_before * (1.0 + cfg.mc_slack);
                    checks.push(
                        BoundCheck::at_most("block_contraction", r.mmd_sq, rhs, 0.0)
                            .with_seed(seed)
                            .with_param("m", r.m as f64)
                            .with_param("rate", rate),
                    );
                }
            }
            let v = &cfg.verify;
            let tol = block_tolerance(v.roundtrip_tol, out.flow.len(), v.inversion_tol);
            match invert_cloud(&out.flow, &out.pushed, tol, v.max_iter) {
                Ok((back, iters)) => {
                    let err = back
                        .points()
                        .zip(q.points())
                        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                        .fold(0.0, f64::max);
                    checks.push(BoundCheck::at_most("inversion_roundtrip", err, v.roundtrip_tol, 0.0).with_seed(seed));
                    checks.push(
                        BoundCheck::at_most("inversion_iterations", iters as f64, v.max_iter as f64, 0.0)
                            .with_seed(seed),
                    );
                }
                Err(e) => {
                    let (c, msg) = failed("inversion_roundtrip", &e.to_string(), seed);
                    checks.push(c);
                    violations.push(msg);
                }
            }
        }
        Err(e) => {
            let (c, v) = failed("flow_build", &e.to_string(), seed);
            checks.push(c);
            violations.push(v);
        }
    }

    for c in &checks {
        if !c.satisfied && !c.lhs.is_nan() {
            violations.push(c.name.clone());
        }
    }
    violations.sort();
    violations.dedup();
    let passed = violations.is_empty();
    Ok(VerifyReport {
        seed,
        certification: cert,
        checks,
        taylor,
        violations,
        passed,
    })
}

/// Runs `verify`, writes `verify.json`, and returns 0 iff every check passed.
pub fn cmd_verify(cfg: &ExperimentConfig) -> Result<i32> {
    let rep = run_verify(cfg)?;
    let dir = out_dir(cfg)?;
    report::write_json(dir.join("verify.json"), &rep)?;
    for v in &rep.violations {
        eprintln!("violation: {v}");
    }
    Ok(if rep.passed { EXIT_OK } else { EXIT_VERIFICATION })
}

/// Parses a comma-separated, strictly decreasing list of ratios in `(0, 1)`.
pub fn parse_deltas(text: &str) -> Result<Vec<f64>> {
    let deltas = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad delta {s:?}: {e}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    validate_deltas(&deltas)?;
    Ok(deltas)
}

fn validate_deltas(deltas: &[f64]) -> Result<()> {
    if deltas.is_empty() {
        return Err(Error::Config("delta list is empty".into()));
    }
    if deltas.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
        return Err(Error::Config("every delta must lie in (0, 1)".into()));
    }
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("delta list must be strictly decreasing".into()));
    }
    Ok(())
}

const SWEEP_KINDS: [(ScheduleKind, &str); 2] = [
    (ScheduleKind::FirstOrder, "first_order"),
    (ScheduleKind::SecondOrder, "second_order"),
];

fn sweep_row(
    cfg: &ExperimentConfig,
    map: &Arc<FeatureMap>,
    pair: &Result<(ParticleCloud, ParticleCloud)>,
    delta: f64,
    kind: ScheduleKind,
    name: &str,
) -> SweepRow {
    let mut row = SweepRow {
        delta,
        schedule: name.to_string(),
        n_predicted: None,
        n_used: None,
        epsilon: None,
        safety_c: None,
        attempts: None,
        initial_mmd_sq: None,
        final_mmd_sq: None,
        achieved_ratio: None,
        target_met: false,
        error: None,
    };
    let result = match pair {
        Ok((q, p)) => construct(cfg, map, q, p, kind, delta),
        Err(e) => Err(Error::Input(e.to_string())),
    };
    match result {
        Ok(out) => {
            let s = out.summary;
            row.n_predicted = Some(s.n_scheduled);
            row.n_used = Some(s.n_used);
            row.epsilon = s.schedule.map(|sc| sc.epsilon());
            row.safety_c = s.safety_c;
            row.attempts = Some(s.attempts);
            row.initial_mmd_sq = Some(s.initial_mmd_sq);
            row.final_mmd_sq = Some(s.final_mmd_sq);
            row.achieved_ratio = Some(s.achieved_ratio);
            row.target_met = s.target_met;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// One fresh construction per ratio and schedule. Row `i` draws its clouds
/// from generator stream `i`, shared by both schedules; failures are
/// recorded in the row's `error` column.
pub fn run_sweep(cfg: &ExperimentConfig, deltas: &[f64]) -> Result<Vec<SweepRow>> {
    validate_deltas(deltas)?;
    let (map, _) = certified_map(cfg)?;
    let rows: Vec<Vec<SweepRow>> = deltas
        .par_iter()
        .enumerate()
        .map(|(i, &delta)| {
            let pair = sample_pair(cfg, i as u64);
            SWEEP_KINDS
                .par_iter()
                .map(|(kind, name)| sweep_row(cfg, &map, &pair, delta, *kind, name))
                .collect()
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Runs `sweep` and writes `sweep.csv` and `sweep.json`. Returns 0 when every
/// row reached its target and 1 otherwise.
pub fn cmd_sweep(cfg: &ExperimentConfig, deltas: &[f64]) -> Result<i32> {
    let rows = run_sweep(cfg, deltas)?;
    let dir = out_dir(cfg)?;
    report::write_text(dir.join("sweep.csv"), &report::sweep_csv(&rows))?;
    report::write_json(dir.join("sweep.json"), &rows)?;
    Ok(if rows.iter().all(|r| r.target_met) { EXIT_OK } else { EXIT_VERIFICATION })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(delta: f64, target: f64) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{"map": {{"kind": "affine", "dim": 1}},
                "source": {{"kind": "point_mass", "x": [0.0]}},
                "target": {{"kind": "point_mass", "x": [{target}]}},
                "n_particles": 3, "delta": {delta}, "certify_samples": 50}}"#
        ))
        .unwrap()
    }

    #[test]
    fn toy_build_uses_five_blocks() {
        let cfg = toy(1e-3, 1.0);
        let (map, _) = certified_map(&cfg).unwrap();
        let (q, p) = sample_pair(&cfg, 0).unwrap();
        let out = construct(&cfg, &map, &q, &p, ScheduleKind::SecondOrder, cfg.delta).unwrap();
        assert_eq!(out.summary.n_used, 5);
        assert!(out.summary.target_met);
        assert_eq!(out.summary.achieved_ratio, 0.25f64.powi(5));
    }

    #[test]
    fn identical_clouds_build_nothing() {
        let cfg = toy(1e-3, 0.0);
        let (map, _) = certified_map(&cfg).unwrap();
        let (q, p) = sample_pair(&cfg, 0).unwrap();
        let out = construct(&cfg, &map, &q, &p, ScheduleKind::SecondOrder, cfg.delta).unwrap();
        assert_eq!(out.summary.n_used, 0);
        assert_eq!(out.summary.achieved_ratio, 0.0);
        assert!(out.summary.target_met);
    }

    #[test]
    fn sweep_second_order_matches_closed_form() {
        let cfg = toy(0.5, 1.0);
        let deltas = [1e-1, 1e-2, 1e-3];
        let rows = run_sweep(&cfg, &deltas).unwrap();
        assert_eq!(rows.len(), 6);
        for (delta, pair) in deltas.iter().zip(rows.chunks(2)) {
            let second = &pair[1];
            let expect = ((1.0 / delta).ln() / 2f64.ln()).ceil() as usize;
            assert_eq!(second.n_predicted, Some(expect));
            assert!(pair.iter().all(|r| r.target_met && r.error.is_none()));
        }
    }

    #[test]
    fn delta_lists_are_validated() {
        assert_eq!(parse_deltas("1e-1, 1e-2").unwrap(), vec![0.1, 0.01]);
        assert!(parse_deltas("1e-2,1e-1").is_err());
        assert!(parse_deltas("2").is_err());
        assert!(parse_deltas("x").is_err());
    }

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::Config(String::new())), 2);
        assert_eq!(exit_code(&Error::Certification(String::new())), 2);
        assert_eq!(exit_code(&Error::Schedule(String::new())), 3);
        assert_eq!(exit_code(&Error::Lipschitz { index: 1, bound: 1.0 }), 3);
        assert_eq!(exit_code(&Error::Numeric(String::new())), 1);
    }
}
