use std::collections::BTreeMap;

use serde::Serialize;

use crate::channel::{sample_channels, ChannelSet, SystemParams};
use crate::error::Result;
use crate::exec::{map_indexed, Execution};
use crate::joint::{initial_point, JointOptions};
use crate::schemes::{isotropic_scheme, proposed_scheme, time_division_scheme, Scheme, SchemeResult};
use crate::seed::trial_seed;

use super::config::{ExperimentConfig, SweepParam};

/// Largest relative energy-harvesting excess a scheme may show before its
/// trial is counted as failed.
const ENERGY_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub point: usize,
    pub trial: usize,
    pub seed: u64,
    /// `None` marks a failed trial.
    pub mse: BTreeMap<Scheme, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub sweep_value: f64,
    pub scheme: Scheme,
    pub mean_mse: f64,
    pub std_err: f64,
    pub trials: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
    pub records: Vec<TrialRecord>,
}

impl SweepResult {
    pub fn empty(param: SweepParam) -> Self {
        Self {
            param,
            rows: Vec::new(),
            records: Vec::new(),
        }
    }

    pub fn row(&self, sweep_value: f64, scheme: Scheme) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.sweep_value == sweep_value && r.scheme == scheme)
    }

    /// Distinct sweep values in ascending order.
    pub fn sweep_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.rows.iter().map(|r| r.sweep_value).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    pub fn schemes(&self) -> Vec<Scheme> {
        let mut v: Vec<Scheme> = self.rows.iter().map(|r| r.scheme).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Points where the mean MSE of consecutive schemes in `order` is not
    /// non-decreasing.
    pub fn ordering_violations(&self, order: &[Scheme]) -> Vec<String> {
        let mut out = Vec::new();
        for x in self.sweep_values() {
            let means: Vec<(Scheme, f64)> = order
                .iter()
                .filter_map(|&s| self.row(x, s).map(|r| (s, r.mean_mse)))
                .collect();
            for pair in means.windows(2) {
                if !(pair[0].1 <= pair[1].1) {
                    out.push(format!(
                        "at {} = {x}: {} mean {:e} exceeds {} mean {:e}",
                        self.param.id(),
                        pair[0].0,
                        pair[0].1,
                        pair[1].0,
                        pair[1].1
                    ));
                }
            }
        }
        out
    }
}

fn accept(result: Result<SchemeResult>, params: &SystemParams, seed: u64) -> Option<SchemeResult> {
    match result {
        Ok(r) if r.mse.is_finite() && r.mse > 0.0 && r.energy_violation(params) <= ENERGY_SLACK => Some(r),
        Ok(r) => {
            log::warn!(
                "trial seed {seed}: {} returned MSE {:e} with energy excess {:e}; counted as failed",
                r.scheme,
                r.mse,
                r.energy_violation(params)
            );
            None
        }
        Err(e) => {
            log::warn!("trial seed {seed}: scheme failed: {e}");
            None
        }
    }
}

/// Runs every requested scheme on one channel draw. The joint design is
/// started from the isotropic solution, so it can only improve on it.
pub fn run_trial(
    schemes: &[Scheme],
    params: &SystemParams,
    channels: &ChannelSet,
    cfg: &ExperimentConfig,
    opts: &JointOptions,
    seed: u64,
) -> BTreeMap<Scheme, Option<SchemeResult>> {
    let mut out = BTreeMap::new();
    let needs_iso = schemes.contains(&Scheme::Isotropic) || schemes.contains(&Scheme::Proposed);
    let iso = if needs_iso {
        accept(isotropic_scheme(params, channels, opts), params, seed)
    } else {
        None
    };
    if schemes.contains(&Scheme::Proposed) {
        let start = match &iso {
            Some(r) => Ok(r.solution.clone()),
            None => initial_point(params, channels),
        };
        let result = start.and_then(|s| proposed_scheme(params, channels, s, opts));
        out.insert(Scheme::Proposed, accept(result, params, seed));
    }
    if schemes.contains(&Scheme::Isotropic) {
        out.insert(Scheme::Isotropic, iso);
    }
    if schemes.contains(&Scheme::TimeDivision) {
        let result = time_division_scheme(params, channels, &cfg.time_division);
        out.insert(Scheme::TimeDivision, accept(result, params, seed));
    }
    out
}

/// Draws `trials` channel sets per sweep point, with seed
/// `trial_seed(cfg.seed, point, trial)`, and runs every scheme in `cfg` on
/// each. Trials are independent tasks; aggregation follows trial order, so
/// the result does not depend on scheduling.
pub fn run_sweep(cfg: &ExperimentConfig, mode: Execution) -> Result<SweepResult> {
    cfg.check()?;
    let points = cfg.sweep.values.len();
    let setups = (0..points).map(|i| cfg.point(i)).collect::<Result<Vec<_>>>()?;
    let opts = cfg.joint_options();
    let model = cfg.model();
    let mut schemes = cfg.schemes.clone();
    schemes.sort();
    schemes.dedup();

    let records = map_indexed(mode, points * cfg.trials, |i| {
        let (point, trial) = (i / cfg.trials, i % cfg.trials);
        let setup = &setups[point];
        let seed = trial_seed(cfg.seed, point as u64, trial as u64);
        let mse = match sample_channels(&setup.params, &model, &setup.distances_m, cfg.rician_kappa, seed) {
            Ok(ch) => run_trial(&schemes, &setup.params, &ch, cfg, &opts, seed)
                .into_iter()
                .map(|(s, r)| (s, r.map(|r| r.mse)))
                .collect(),
            Err(e) => {
                log::warn!("trial seed {seed}: channel draw failed: {e}");
                schemes.iter().map(|&s| (s, None)).collect()
            }
        };
        TrialRecord { point, trial, seed, mse }
    });

    let mut rows = Vec::new();
    for (point, &value) in cfg.sweep.values.iter().enumerate() {
        for &scheme in &schemes {
            let values: Vec<f64> = records
                .iter()
                .filter(|r| r.point == point)
                .filter_map(|r| r.mse.get(&scheme).copied().flatten())
                .collect();
            rows.push(summarize(value, scheme, &values, cfg.trials));
        }
    }
    rows.sort_by(|a, b| a.sweep_value.total_cmp(&b.sweep_value).then(a.scheme.id().cmp(b.scheme.id())));
    Ok(SweepResult {
        param: cfg.sweep.param,
        rows,
        records,
    })
}

fn summarize(sweep_value: f64, scheme: Scheme, values: &[f64], configured: usize) -> SweepRow {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_err = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    SweepRow {
        sweep_value,
        scheme,
        mean_mse: if n > 0 { mean } else { f64::NAN },
        std_err,
        trials: n,
        failures: configured - n,
    }
}
