use std::fmt;

use serde::Serialize;

use crate::channel::sample_channels;
use crate::error::Result;
use crate::exec::{map_indexed, Execution};
use crate::joint::{compute_mse, empirical_mse, receive_beamformer, solve_joint, SymbolDistribution};
use crate::seed::{substream, trial_seed};

use super::config::ExperimentConfig;

/// Normalized KKT residual bound, also applied to the relative MSE gain a
/// fresh receiver update would still achieve.
pub const KKT_TOL: f64 = 1e-6;
pub const MONOTONE_SLACK: f64 = 1e-9;
pub const FEASIBILITY_TOL: f64 = 1e-8;
pub const NORMAL_TOL: f64 = 1e-10;
/// Fraction of instances whose analytic MSE must lie within three standard
/// errors of the Monte Carlo estimate.
pub const AGREEMENT_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub instances: usize,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct InstanceAudit {
    seed: u64,
    monotone_excess: f64,
    converged: bool,
    iterations: usize,
    kkt: f64,
    receiver_gain: f64,
    feasibility: f64,
    normal: f64,
    agreement: Option<(f64, f64)>,
    error: Option<String>,
}

impl InstanceAudit {
    fn failed(seed: u64, error: String) -> Self {
        Self {
            seed,
            monotone_excess: f64::INFINITY,
            converged: false,
            iterations: 0,
            kkt: f64::INFINITY,
            receiver_gain: f64::INFINITY,
            feasibility: f64::INFINITY,
            normal: f64::INFINITY,
            agreement: None,
            error: Some(error),
        }
    }
}

fn audit_one(cfg: &ExperimentConfig, index: usize) -> InstanceAudit {
    let point = index % cfg.sweep.values.len();
    let seed = trial_seed(substream(cfg.seed, u64::MAX), point as u64, index as u64);
    let run = || -> Result<InstanceAudit> {
        let setup = cfg.point(point)?;
        let p = setup.params;
        let ch = sample_channels(&p, &cfg.model(), &setup.distances_m, cfg.rician_kappa, seed)?;
        let (sol, report) = solve_joint(&p, &ch, &cfg.joint_options())?;
        let mse = sol.mse(&ch, p.noise_w);
        let w_star = receive_beamformer(&sol.b, &ch, p.noise_w)?;
        let receiver_gain = ((mse - compute_mse(&w_star, &sol.b, &ch, p.noise_w)) / mse).max(0.0);
        let monotone_excess = report
            .mse_trajectory
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::NEG_INFINITY, f64::max);
        let agreement = if cfg.validate.empirical_trials > 0 {
            let est = empirical_mse(
                &sol,
                &ch,
                p.noise_w,
                cfg.validate.empirical_trials.max(1000),
                substream(seed, 1),
                SymbolDistribution::Gaussian,
                Execution::Sequential,
            )?;
            Some(((est.estimate - mse).abs(), est.std_error))
        } else {
            None
        };
        Ok(InstanceAudit {
            seed,
            monotone_excess,
            converged: report.converged,
            iterations: report.iterations,
            kkt: report.kkt.map_or(f64::INFINITY, |k| k.max_residual()),
            receiver_gain,
            feasibility: sol.feasibility(&ch, &p).max(),
            normal: report.max_normal_residual,
            agreement,
            error: None,
        })
    };
    run().unwrap_or_else(|e| InstanceAudit::failed(seed, e.to_string()))
}

fn check(name: &'static str, audits: &[InstanceAudit], ok: impl Fn(&InstanceAudit) -> bool, what: &str) -> Check {
    let bad: Vec<u64> = audits.iter().filter(|a| !ok(a)).map(|a| a.seed).collect();
    let detail = if bad.is_empty() {
        format!("{} of {} instances {what}", audits.len(), audits.len())
    } else {
        let shown: Vec<String> = bad.iter().take(5).map(|s| s.to_string()).collect();
        format!(
            "{} of {} instances {what}; failing seeds {}{}",
            audits.len() - bad.len(),
            audits.len(),
            shown.join(", "),
            if bad.len() > 5 { ", ..." } else { "" }
        )
    };
    Check {
        name,
        passed: bad.is_empty(),
        detail,
    }
}

/// Solves `cfg.validate.instances` seeded instances with the joint design,
/// cycling through the sweep points, and audits monotonicity, convergence,
/// KKT residuals, feasibility, the receiver normal equations and analytic
/// versus simulated MSE.
pub fn validate(cfg: &ExperimentConfig, mode: Execution) -> Result<AuditReport> {
    cfg.check()?;
    let n = cfg.validate.instances;
    let mut warnings = Vec::new();
    if n == 0 {
        warnings.push("no instances configured; every check passes vacuously".to_string());
    }
    let audits = map_indexed(mode, n, |i| audit_one(cfg, i));
    for a in &audits {
        if let Some(e) = &a.error {
            warnings.push(format!("seed {}: {e}", a.seed));
        }
    }
    let mut checks = vec![
        check(
            "monotonicity",
            &audits,
            |a| a.monotone_excess <= MONOTONE_SLACK,
            "have a non-increasing MSE trajectory",
        ),
        check(
            "convergence",
            &audits,
            |a| a.converged,
            &format!("converge within {} outer iterations", cfg.solver.max_outer),
        ),
        check(
            "kkt",
            &audits,
            |a| a.kkt <= KKT_TOL && a.receiver_gain <= KKT_TOL,
            &format!("meet KKT residuals and receiver stationarity within {KKT_TOL:e}"),
        ),
        check(
            "feasibility",
            &audits,
            |a| a.feasibility <= FEASIBILITY_TOL,
            "satisfy energy, power and PSD constraints",
        ),
        check(
            "normal_equations",
            &audits,
            |a| a.normal <= NORMAL_TOL,
            &format!("solve the receiver normal equations within {NORMAL_TOL:e}"),
        ),
    ];
    if cfg.validate.empirical_trials > 0 {
        let within = audits
            .iter()
            .filter(|a| a.agreement.is_some_and(|(d, se)| d <= 3.0 * se))
            .count();
        let needed = (AGREEMENT_FRACTION * n as f64).ceil() as usize;
        checks.push(Check {
            name: "empirical_mse",
            passed: within >= needed,
            detail: format!("{within} of {n} instances within 3 standard errors (need {needed})"),
        });
    }
    if let Some(max_it) = audits.iter().filter(|a| a.error.is_none()).map(|a| a.iterations).max() {
        log::info!("largest outer iteration count {max_it}");
    }
    Ok(AuditReport {
        instances: n,
        checks,
        warnings,
    })
}
