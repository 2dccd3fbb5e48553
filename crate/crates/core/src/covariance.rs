//! Energy covariance recovery: find `S >= 0` with `tr(S) <= P` and
//! `alpha2 b_k^2 <= alpha1 eta h_k^H S h_k` for given amplitudes, by Dykstra's
//! alternating projections over the K energy halfspaces, the trace halfspace
//! and the PSD cone. Every projection is closed form.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::channel::{ChannelSet, SystemParams};
use crate::error::{Error, Result};
use crate::numerics::{project_psd, ComplexVector, HermitianMatrix};

/// Required harvested-energy levels `c_k = alpha2 b_k^2`, before the
/// `alpha1 eta` scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyRequirement {
    pub c: Vec<f64>,
}

impl EnergyRequirement {
    pub fn from_amplitudes(b_tilde: &[f64], alpha2: f64) -> Self {
        Self {
            c: b_tilde.iter().map(|b| alpha2 * b * b).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c.iter().all(|&c| c >= 0.0 && c.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParameter("energy requirements must be finite and >= 0".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceOptions {
    pub max_epochs: usize,
    /// Relative tolerance on every constraint residual.
    pub tol: f64,
    /// Epochs before residual monotonicity is monitored.
    pub burn_in: usize,
    /// Log a warning on the first residual increase after burn-in. The count
    /// is reported either way.
    pub warn_on_increase: bool,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        Self {
            max_epochs: 20_000,
            tol: 1e-8,
            burn_in: 10,
            warn_on_increase: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceResult {
    pub s: HermitianMatrix,
    /// `h_k^H S h_k - c_k / (alpha1 eta)` per device, then `P - tr(S)`.
    pub residuals: Vec<f64>,
    /// Largest relative constraint violation of `s`.
    pub violation: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Epochs (after burn-in) whose residual max-norm exceeded the previous one.
    pub monotonicity_violations: usize,
}

/// Frobenius projection onto `{X : tr(X) <= P}`.
pub fn project_trace(s: &HermitianMatrix, power: f64) -> HermitianMatrix {
    let tr = s.trace();
    if tr <= power {
        return s.clone();
    }
    let mut out = s.clone();
    out.add_identity(-(tr - power) / s.dim() as f64);
    out
}

/// Frobenius projection onto `{X : h^H X h >= target}`.
pub fn project_energy(s: &HermitianMatrix, h: &ComplexVector, target: f64) -> Result<HermitianMatrix> {
    let have = s.quad_form_re(h);
    if have >= target {
        return Ok(s.clone());
    }
    let n2 = h.norm_squared();
    if n2 == 0.0 {
        return Err(Error::Infeasible("zero channel with positive energy target".into()));
    }
    let mut out = s.clone();
    out.add_outer(h, (target - have) / (n2 * n2));
    Ok(out)
}

struct Problem<'a> {
    vectors: &'a [ComplexVector],
    targets: Vec<f64>,
    power: f64,
}

impl Problem<'_> {
    fn residuals(&self, s: &HermitianMatrix) -> Vec<f64> {
        let mut r: Vec<f64> = self
            .vectors
            .iter()
            .zip(&self.targets)
            .map(|(h, t)| s.quad_form_re(h) - t)
            .collect();
        r.push(self.power - s.trace());
        r
    }

    /// Largest relative violation over the energy and trace constraints.
    fn violation(&self, residuals: &[f64]) -> f64 {
        let k = self.targets.len();
        let energy = residuals[..k]
            .iter()
            .zip(&self.targets)
            .filter(|(_, &t)| t > 0.0)
            .map(|(&r, &t)| (-r / t).max(0.0))
            .fold(0.0, f64::max);
        energy.max((-residuals[k] / self.power).max(0.0))
    }

    fn dykstra(&self, start: HermitianMatrix, opts: &CovarianceOptions) -> Result<CovarianceResult> {
        let n_sets = self.vectors.len() + 2;
        let dim = start.dim();
        let mut incr: Vec<HermitianMatrix> = (0..n_sets).map(|_| HermitianMatrix::zeros(dim)).collect();
        let mut x = start;
        let mut prev = f64::INFINITY;
        let mut violations = 0;
        for epoch in 1..=opts.max_epochs {
            for (i, inc) in incr.iter_mut().enumerate() {
                let y = x.add(inc);
                let p = if i < self.vectors.len() {
                    project_energy(&y, &self.vectors[i], self.targets[i])?
                } else if i == self.vectors.len() {
                    project_trace(&y, self.power)
                } else {
                    project_psd(&y)
                };
                *inc = y.sub(&p);
                x = p;
            }
            let residuals = self.residuals(&x);
            let v = self.violation(&residuals);
            if epoch > opts.burn_in && v > prev {
                if violations == 0 && opts.warn_on_increase {
                    log::warn!("Dykstra residual increased at epoch {epoch}: {prev:e} -> {v:e}");
                }
                violations += 1;
            }
            prev = v;
            if v <= opts.tol {
                return Ok(CovarianceResult {
                    s: x,
                    residuals,
                    violation: v,
                    converged: true,
                    iterations: epoch,
                    monotonicity_violations: violations,
                });
            }
        }
        let residuals = self.residuals(&x);
        Ok(CovarianceResult {
            violation: self.violation(&residuals),
            s: x,
            residuals,
            converged: false,
            iterations: opts.max_epochs,
            monotonicity_violations: violations,
        })
    }
}

fn targets(req: &EnergyRequirement, params: &SystemParams) -> Vec<f64> {
    req.c.iter().map(|c| c / params.harvest_gain()).collect()
}

/// Dykstra's projections from `start` (default `(P/M) I`).
pub fn solve_covariance(
    channels: &ChannelSet,
    req: &EnergyRequirement,
    params: &SystemParams,
    start: Option<HermitianMatrix>,
    opts: &CovarianceOptions,
) -> Result<CovarianceResult> {
    channels.check_matches(params)?;
    req.validate()?;
    if req.c.len() != channels.devices() {
        return Err(Error::Shape(format!("{} requirements for {} devices", req.c.len(), channels.devices())));
    }
    let m = channels.antennas();
    let start = start.unwrap_or_else(|| HermitianMatrix::scaled_identity(m, params.power_w / m as f64));
    if start.dim() != m {
        return Err(Error::Shape("start point has the wrong dimension".into()));
    }
    let problem = Problem {
        vectors: &channels.h,
        targets: targets(req, params),
        power: params.power_w,
    };
    problem.dykstra(start, opts)
}

/// Same feasibility problem restricted to `S = U Q U^H` for an orthonormal
/// `basis` `U` (M x r). Runs on the r x r matrix `Q` from `(P/r) I` and
/// returns the lifted `S`.
pub fn solve_covariance_in_subspace(
    basis: &DMatrix<Complex64>,
    channels: &ChannelSet,
    req: &EnergyRequirement,
    params: &SystemParams,
    opts: &CovarianceOptions,
) -> Result<CovarianceResult> {
    channels.check_matches(params)?;
    req.validate()?;
    let r = basis.ncols();
    if basis.nrows() != channels.antennas() || r == 0 {
        return Err(Error::Shape("subspace basis has the wrong shape".into()));
    }
    let reduced: Vec<ComplexVector> = channels.h.iter().map(|h| basis.adjoint() * h).collect();
    let problem = Problem {
        vectors: &reduced,
        targets: targets(req, params),
        power: params.power_w,
    };
    let mut out = problem.dykstra(HermitianMatrix::scaled_identity(r, params.power_w / r as f64), opts)?;
    out.s = out.s.congruence(basis);
    let full = Problem {
        vectors: &channels.h,
        targets: problem.targets.clone(),
        power: params.power_w,
    };
    out.residuals = full.residuals(&out.s);
    out.violation = full.violation(&out.residuals);
    Ok(out)
}

/// Largest `rho <= 1` such that `alpha2 (rho b_k)^2 <= alpha1 eta P |h_k|^2`
/// for every device, the single-constraint necessary condition for
/// feasibility.
pub fn necessary_scaling(channels: &ChannelSet, req: &EnergyRequirement, params: &SystemParams) -> f64 {
    channels
        .h
        .iter()
        .zip(&req.c)
        .filter(|(_, &c)| c > 0.0)
        .map(|(h, &c)| (params.harvest_gain() * params.power_w * h.norm_squared() / c).sqrt())
        .fold(1.0, f64::min)
}
