//! Alternating optimization of the energy covariance, the device amplitudes
//! and the receive beamformer, plus MSE evaluation and a KKT audit.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::channel::{ChannelSet, SystemParams};
use crate::covariance::{
    necessary_scaling, solve_covariance, solve_covariance_in_subspace, CovarianceOptions, CovarianceResult,
    EnergyRequirement,
};
use crate::dual::{build_f, solve_inner, CutCounts, DualPoint, InnerOptions, InnerSolution};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::numerics::{hermitian_eig, normalize, project_psd, solve_hpd, ComplexVector, HermitianMatrix};
use crate::seed::substream;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingSolution {
    pub s: HermitianMatrix,
    pub w: ComplexVector,
    pub b: Vec<Complex64>,
    pub b_tilde: Vec<f64>,
}

/// Relative constraint violations of a solution; all zero when feasible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Feasibility {
    /// `max_k (alpha2 |b_k|^2 - alpha1 eta h_k^H S h_k)_+ / (alpha1 eta P |h_k|^2)`
    pub energy: f64,
    /// `(tr(S) - P)_+ / P`
    pub power: f64,
    /// `(-lambda_min(S))_+ / P`
    pub psd: f64,
}

impl Feasibility {
    pub fn max(&self) -> f64 {
        self.energy.max(self.power).max(self.psd)
    }
}

impl BeamformingSolution {
    pub fn mse(&self, channels: &ChannelSet, noise_w: f64) -> f64 {
        compute_mse(&self.w, &self.b, channels, noise_w)
    }

    pub fn feasibility(&self, channels: &ChannelSet, params: &SystemParams) -> Feasibility {
        let hg = params.harvest_gain();
        let energy = channels
            .h
            .iter()
            .zip(&self.b)
            .map(|(h, b)| {
                let need = params.alpha2 * b.norm_sqr();
                let have = hg * self.s.quad_form_re(h);
                let scale = hg * params.power_w * h.norm_squared();
                if scale > 0.0 {
                    (need - have).max(0.0) / scale
                } else if need > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max);
        let eig = hermitian_eig(&self.s);
        Feasibility {
            energy,
            power: (self.s.trace() - params.power_w).max(0.0) / params.power_w,
            psd: (-eig.values[0]).max(0.0) / params.power_w,
        }
    }

    fn check_shape(&self, channels: &ChannelSet) -> Result<()> {
        let (m, k) = (channels.antennas(), channels.devices());
        if self.s.dim() != m || self.w.len() != m || self.b.len() != k || self.b_tilde.len() != k {
            return Err(Error::Shape("solution does not match the channel set".into()));
        }
        Ok(())
    }
}

/// `conj(w^H h) / |w^H h| * b_tilde`, so that `w^H h b` is real and
/// nonnegative. Zero when `w^H h = 0`.
pub fn phase_align(w: &ComplexVector, h: &ComplexVector, b_tilde: f64) -> Complex64 {
    let g = w.dotc(h);
    let n = g.norm();
    if n == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        g.conj() / n * b_tilde
    }
}

pub fn align_all(w: &ComplexVector, channels: &ChannelSet, b_tilde: &[f64]) -> Vec<Complex64> {
    channels.h.iter().zip(b_tilde).map(|(h, &b)| phase_align(w, h, b)).collect()
}

fn normal_system(b: &[Complex64], channels: &ChannelSet, sigma2: f64) -> (HermitianMatrix, ComplexVector) {
    let m = channels.antennas();
    let mut a = HermitianMatrix::scaled_identity(m, sigma2);
    let mut rhs = ComplexVector::zeros(m);
    for (h, bk) in channels.h.iter().zip(b) {
        a.add_outer(h, bk.norm_sqr());
        rhs.axpy(*bk, h, Complex64::new(1.0, 0.0));
    }
    (a, rhs)
}

/// MMSE receive beamformer `(sum_k |b_k|^2 h_k h_k^H + sigma2 I)^{-1} sum_k b_k h_k`.
pub fn receive_beamformer(b: &[Complex64], channels: &ChannelSet, sigma2: f64) -> Result<ComplexVector> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!("noise power must be positive, got {sigma2}")));
    }
    if b.len() != channels.devices() {
        return Err(Error::Shape(format!("{} coefficients for {} devices", b.len(), channels.devices())));
    }
    let (a, rhs) = normal_system(b, channels, sigma2);
    if rhs.norm() == 0.0 {
        return Ok(rhs);
    }
    solve_hpd(&a, &rhs)
}

/// `|A w - r| / max(|r|, |A| |w|)` for the beamformer normal equations.
pub fn normal_equation_residual(b: &[Complex64], channels: &ChannelSet, sigma2: f64, w: &ComplexVector) -> f64 {
    let (a, rhs) = normal_system(b, channels, sigma2);
    let res = (a.as_matrix() * w - &rhs).norm();
    let denom = rhs.norm().max(a.max_abs() * w.norm());
    if denom == 0.0 {
        res
    } else {
        res / denom
    }
}

/// `(1/K^2) (sum_k |w^H h_k b_k - 1|^2 + |w|^2 sigma2)`
pub fn compute_mse(w: &ComplexVector, b: &[Complex64], channels: &ChannelSet, sigma2: f64) -> f64 {
    let k = channels.devices() as f64;
    let mis: f64 = channels
        .h
        .iter()
        .zip(b)
        .map(|(h, bk)| (w.dotc(h) * bk - 1.0).norm_sqr())
        .sum();
    (mis + w.norm_squared() * sigma2) / (k * k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolDistribution {
    #[default]
    Gaussian,
    /// Equiprobable `+1` / `-1`.
    Rademacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MseEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub trials: usize,
}

const MC_CHUNK: usize = 2048;

/// Monte Carlo estimate of `E|f_hat - f|^2` with `f` the mean of the device
/// symbols and `f_hat = (1/K) w^H (sum_k h_k b_k s_k + z)`. Trials run in
/// fixed chunks with their own substream of `seed`, so the result does not
/// depend on the number of workers.
pub fn empirical_mse(
    solution: &BeamformingSolution,
    channels: &ChannelSet,
    sigma2: f64,
    trials: usize,
    seed: u64,
    symbols: SymbolDistribution,
    mode: Execution,
) -> Result<MseEstimate> {
    if trials < 1000 {
        return Err(Error::InvalidParameter(format!("need at least 1000 trials, got {trials}")));
    }
    solution.check_shape(channels)?;
    let k = channels.devices();
    let m = channels.antennas();
    let gains: Vec<Complex64> = channels
        .h
        .iter()
        .zip(&solution.b)
        .map(|(h, b)| solution.w.dotc(h) * b)
        .collect();
    let w_conj: Vec<Complex64> = solution.w.iter().map(|x| x.conj()).collect();
    let noise_sd = (sigma2 / 2.0).sqrt();
    let inv_k = 1.0 / k as f64;
    let chunks = trials.div_ceil(MC_CHUNK);

    let sums = map_indexed(mode, chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, c as u64));
        let n = MC_CHUNK.min(trials - c * MC_CHUNK);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut f = 0.0;
            let mut f_hat = Complex64::new(0.0, 0.0);
            for g in &gains {
                let s: f64 = match symbols {
                    SymbolDistribution::Gaussian => StandardNormal.sample(&mut rng),
                    SymbolDistribution::Rademacher => {
                        if rand::Rng::gen::<bool>(&mut rng) {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                };
                f += s;
                f_hat += g * s;
            }
            for wc in w_conj.iter().take(m) {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                f_hat += wc * Complex64::new(re * noise_sd, im * noise_sd);
            }
            let e = (f_hat * inv_k - f * inv_k).norm_sqr();
            s1 += e;
            s2 += e * e;
        }
        (s1, s2)
    });
    let (s1, s2) = sums.iter().fold((0.0, 0.0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    let n = trials as f64;
    let mean = s1 / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(MseEstimate {
        estimate: mean,
        std_error: (var / n).sqrt(),
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointOptions {
    /// Stop when the relative MSE decrement falls below this.
    pub mse_tol: f64,
    pub max_outer: usize,
    pub inner: InnerOptions,
    /// Full-space covariance recovery.
    pub covariance: CovarianceOptions,
    /// Epoch cap for each reduced-subspace covariance attempt.
    pub subspace_epochs: usize,
    /// Largest relative shortfall of a recovered covariance that is accepted
    /// before the amplitudes are re-optimized for it.
    pub accept_violation: f64,
    /// A recovered covariance is also accepted once its re-optimized
    /// amplitudes are within this normalized distance of the dual bound.
    pub gap_tol: f64,
    /// Over-relaxed receiver steps, kept only when they lower the MSE.
    pub extrapolation: bool,
    pub max_extrapolation: f64,
    pub refine_steps: usize,
}

impl Default for JointOptions {
    fn default() -> Self {
        Self {
            mse_tol: 1e-8,
            max_outer: 200,
            inner: InnerOptions::default(),
            covariance: CovarianceOptions {
                warn_on_increase: false,
                ..Default::default()
            },
            subspace_epochs: 200,
            accept_violation: 1e-6,
            gap_tol: 1e-9,
            extrapolation: true,
            refine_steps: 50,
            max_extrapolation: 1024.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovarianceReport {
    pub converged: bool,
    pub epochs: usize,
    /// Dimension of the subspace the covariance was found in (M for the full space).
    pub rank: usize,
    /// Amplitudes were scaled down before the covariance search succeeded.
    pub rescaled: bool,
    /// Dykstra epochs, over all attempts, whose residual rose after burn-in.
    pub residual_increases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnerReport {
    pub iteration: usize,
    pub converged: bool,
    pub iterations: usize,
    pub gap: f64,
    pub cuts: CutCounts,
    pub covariance: CovarianceReport,
    /// False when the step would have increased the MSE and was discarded.
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktReport {
    /// `max_k |b_k (a_k^2 + mu_k alpha2) - a_k| / a_k`
    pub stationarity: f64,
    pub energy_feasibility: f64,
    pub power_feasibility: f64,
    pub psd_feasibility: f64,
    /// `(-lambda_min(F(mu)))_+ P / (1 + f)`
    pub dual_feasibility: f64,
    /// `max_k mu_k (alpha1 eta h_k^H S h_k - alpha2 b_k^2) / (1 + f)`
    pub complementary_energy: f64,
    /// `nu |P - tr(S)| / (1 + f)`
    pub complementary_power: f64,
    /// `|tr(F(mu) S)| / (1 + f)`
    pub trace_fs: f64,
    /// `(f - g(mu, nu)) / (1 + f)`
    pub duality_gap: f64,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        [
            self.stationarity,
            self.energy_feasibility,
            self.power_feasibility,
            self.psd_feasibility,
            self.dual_feasibility,
            self.complementary_energy,
            self.complementary_power,
            self.trace_fs,
            self.duality_gap.abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    /// MSE of the starting point followed by the MSE after every outer iteration.
    pub mse_trajectory: Vec<f64>,
    pub inner_reports: Vec<InnerReport>,
    pub kkt: Option<KktReport>,
    pub dual: Option<DualPoint>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest relative residual of the beamformer normal equations.
    pub max_normal_residual: f64,
}

/// Residuals of the optimality conditions of the amplitude / covariance
/// subproblem at `solution.w`. All entries are normalized and zero at an
/// exact optimum.
pub fn kkt_audit(
    solution: &BeamformingSolution,
    dual: &DualPoint,
    channels: &ChannelSet,
    params: &SystemParams,
) -> Result<KktReport> {
    solution.check_shape(channels)?;
    if dual.mu.len() != channels.devices() {
        return Err(Error::Shape("dual point does not match the channel set".into()));
    }
    let gains = channels.effective_gains(&solution.w);
    let a2 = params.alpha2;
    let hg = params.harvest_gain();
    let f: f64 = gains
        .iter()
        .zip(&solution.b_tilde)
        .map(|(a, b)| (a * b - 1.0).powi(2))
        .sum();
    let norm = 1.0 + f;

    let mut stationarity: f64 = 0.0;
    let mut comp_energy: f64 = 0.0;
    let mut energy_feas: f64 = 0.0;
    let mut g = -dual.nu * params.power_w;
    for (k, h) in channels.h.iter().enumerate() {
        let (a, b, mu) = (gains[k], solution.b_tilde[k], dual.mu[k]);
        if a > 0.0 {
            stationarity = stationarity.max((b * (a * a + mu * a2) - a).abs() / a);
            g += mu * a2 / (a * a + mu * a2);
        } else {
            stationarity = stationarity.max(mu * a2 * b / norm);
            g += 1.0;
        }
        let have = hg * solution.s.quad_form_re(h);
        let slack = have - a2 * b * b;
        comp_energy = comp_energy.max((mu * slack).abs() / norm);
        let scale = hg * params.power_w * h.norm_squared();
        if scale > 0.0 {
            energy_feas = energy_feas.max((-slack).max(0.0) / scale);
        }
    }
    let fmat = build_f(dual, channels, params.alpha1, params.eta);
    let f_eig = hermitian_eig(&fmat);
    let s_eig = hermitian_eig(&solution.s);
    let tr = solution.s.trace();
    Ok(KktReport {
        stationarity,
        energy_feasibility: energy_feas,
        power_feasibility: (tr - params.power_w).max(0.0) / params.power_w,
        psd_feasibility: (-s_eig.values[0]).max(0.0) / params.power_w,
        dual_feasibility: (-f_eig.values[0]).max(0.0) * params.power_w / norm,
        complementary_energy: comp_energy,
        complementary_power: dual.nu * (params.power_w - tr).abs() / norm,
        trace_fs: fmat.inner(&solution.s).abs() / norm,
        duality_gap: (f - g) / norm,
    })
}

/// Starting point: isotropic charging `S = (P/M) I` with every device using
/// its full harvested energy, phases aligned to the normalized channel sum,
/// and the matching MMSE receiver.
pub fn initial_point(params: &SystemParams, channels: &ChannelSet) -> Result<BeamformingSolution> {
    params.validate()?;
    channels.check_matches(params)?;
    let m = channels.antennas();
    let s = HermitianMatrix::scaled_identity(m, params.power_w / m as f64);
    let b_tilde: Vec<f64> = channels
        .h
        .iter()
        .map(|h| (params.harvest_gain() * s.quad_form_re(h) / params.alpha2).sqrt())
        .collect();
    let sum = channels.h.iter().fold(ComplexVector::zeros(m), |acc, h| acc + h);
    let w_mr = if sum.norm() > 0.0 { normalize(&sum) } else { normalize(&channels.h[0]) };
    let b = align_all(&w_mr, channels, &b_tilde);
    let w = receive_beamformer(&b, channels, params.noise_w)?;
    Ok(BeamformingSolution { s, w, b, b_tilde })
}

/// Projects `S` onto the PSD cone, then scales it into the power budget.
pub(crate) fn feasible_covariance(s: &HermitianMatrix, power: f64) -> HermitianMatrix {
    let s = project_psd(s);
    let tr = s.trace();
    if tr > power {
        s.scale(power / tr)
    } else {
        s
    }
}

/// Exact amplitude optimum for a fixed feasible covariance: channel inversion
/// `1 / a_k`, truncated at the energy the device harvests.
pub(crate) fn optimal_amplitudes(
    s: &HermitianMatrix,
    w: &ComplexVector,
    channels: &ChannelSet,
    params: &SystemParams,
) -> Vec<f64> {
    channels
        .h
        .iter()
        .map(|h| {
            let a = w.dotc(h).norm();
            if a == 0.0 {
                return 0.0;
            }
            let cap = (params.harvest_gain() * s.quad_form_re(h).max(0.0) / params.alpha2).sqrt();
            cap.min(1.0 / a)
        })
        .collect()
}

/// Finds a covariance for the amplitudes of `inner`. Candidates come from the
/// near-null eigenspaces of `F(mu)` of growing dimension, then the full
/// space, then the full space with uniformly scaled-down amplitudes. Each
/// candidate's amplitudes are re-optimized for it; the first one that either
/// powers the dual amplitudes within `opts.accept_violation` or closes the
/// duality gap to `opts.gap_tol` is taken, otherwise the best one seen.
fn recover_covariance(
    w: &ComplexVector,
    channels: &ChannelSet,
    params: &SystemParams,
    inner: &InnerSolution,
    opts: &JointOptions,
) -> Result<(HermitianMatrix, Vec<f64>, CovarianceReport)> {
    let m = channels.antennas();
    let gains = channels.effective_gains(w);
    let req = EnergyRequirement::from_amplitudes(&inner.b_tilde, params.alpha2);
    let mut epochs = 0;
    let mut increases = 0;
    let mut best: Option<(f64, HermitianMatrix, Vec<f64>, CovarianceReport)> = None;
    let mut consider = |out: CovarianceResult, epochs: usize, rank: usize, rescaled: bool| {
        let s = feasible_covariance(&out.s, params.power_w);
        let b = optimal_amplitudes(&s, w, channels, params);
        let f: f64 = gains.iter().zip(&b).map(|(a, b)| (a * b - 1.0).powi(2)).sum();
        let ok = out.violation <= opts.accept_violation || f - inner.dual_value <= opts.gap_tol * (1.0 + f);
        increases += out.monotonicity_violations;
        let report = CovarianceReport {
            converged: ok,
            epochs,
            rank,
            rescaled,
            residual_increases: increases,
        };
        if best.as_ref().is_none_or(|x| f < x.0) {
            best = Some((f, s, b, report));
        }
        ok
    };
    if inner.dual.nu > 0.0 && m > 1 {
        let fmat = build_f(&inner.dual, channels, params.alpha1, params.eta);
        let eig = hermitian_eig(&fmat);
        let top = eig.values[m - 1].abs().max(f64::MIN_POSITIVE);
        let sub = CovarianceOptions {
            max_epochs: opts.subspace_epochs,
            warn_on_increase: false,
            ..opts.covariance.clone()
        };
        for r in 1..m {
            if r > 1 && eig.values[r - 1] > 1e-4 * top {
                break;
            }
            let basis: DMatrix<Complex64> = eig.vectors.columns(0, r).into_owned();
            let out = solve_covariance_in_subspace(&basis, channels, &req, params, &sub)?;
            epochs += out.iterations;
            if consider(out, epochs, r, false) {
                return Ok(take(best));
            }
        }
    }
    let full = solve_covariance(channels, &req, params, None, &opts.covariance)?;
    epochs += full.iterations;
    if consider(full, epochs, m, false) {
        return Ok(take(best));
    }
    let rho = necessary_scaling(channels, &req, params);
    if rho < 1.0 {
        let b: Vec<f64> = inner.b_tilde.iter().map(|b| b * rho).collect();
        let req = EnergyRequirement::from_amplitudes(&b, params.alpha2);
        let out = solve_covariance(channels, &req, params, None, &opts.covariance)?;
        epochs += out.iterations;
        if consider(out, epochs, m, true) {
            return Ok(take(best));
        }
    }
    let (f, s, b, report) = best.expect("at least one candidate was considered");
    log::warn!(
        "covariance recovery left a duality gap of {:e}; using the best covariance found",
        f - inner.dual_value
    );
    Ok((s, b, report))
}

fn take(best: Option<(f64, HermitianMatrix, Vec<f64>, CovarianceReport)>) -> (HermitianMatrix, Vec<f64>, CovarianceReport) {
    let (_, s, b, r) = best.expect("candidate recorded before acceptance");
    (s, b, r)
}

fn best_amplitudes(
    s: &HermitianMatrix,
    w: &ComplexVector,
    channels: &ChannelSet,
    params: &SystemParams,
) -> BeamformingSolution {
    let b_tilde = optimal_amplitudes(s, w, channels, params);
    BeamformingSolution {
        b: align_all(w, channels, &b_tilde),
        s: s.clone(),
        w: w.clone(),
        b_tilde,
    }
}

/// Alternates the receiver and the closed-form amplitudes with the covariance
/// held fixed, until the relative decrement drops below `opts.mse_tol` or
/// `opts.refine_steps` rounds have run.
fn refine_fixed_covariance(
    mut sol: BeamformingSolution,
    channels: &ChannelSet,
    params: &SystemParams,
    opts: &JointOptions,
) -> Result<(BeamformingSolution, f64)> {
    let mut mse = sol.mse(channels, params.noise_w);
    for _ in 0..opts.refine_steps {
        let w = receive_beamformer(&sol.b, channels, params.noise_w)?;
        if w.norm() == 0.0 {
            break;
        }
        let next = best_amplitudes(&sol.s, &w, channels, params);
        let e = next.mse(channels, params.noise_w);
        if e > mse {
            break;
        }
        let done = mse - e < opts.mse_tol * mse;
        sol = next;
        mse = e;
        if done {
            break;
        }
    }
    Ok((sol, mse))
}

pub(crate) struct Step {
    pub solution: BeamformingSolution,
    pub report: Option<InnerReport>,
    pub dual: Option<DualPoint>,
}

/// Alternates `step` (amplitudes and covariance at fixed `w`) with the MMSE
/// receiver update. A step that would raise the MSE is replaced by the
/// previous amplitudes re-aligned to the current `w`, so the trajectory is
/// non-increasing. The loop always ends on a `step`, so the returned
/// amplitudes are consistent with the returned receiver.
pub(crate) fn alternate(
    params: &SystemParams,
    channels: &ChannelSet,
    start: BeamformingSolution,
    opts: &JointOptions,
    mut step: impl FnMut(&BeamformingSolution, usize) -> Result<Step>,
) -> Result<(BeamformingSolution, SolverReport)> {
    params.validate()?;
    channels.check_matches(params)?;
    start.check_shape(channels)?;
    let sigma2 = params.noise_w;
    let mut sol = start;
    let mut traj = vec![sol.mse(channels, sigma2)];
    let mut reports = Vec::new();
    let mut dual = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut max_normal: f64 = 0.0;
    let mut prev_s: Option<HermitianMatrix> = None;
    for it in 1..=opts.max_outer {
        iterations = it;
        let mut next = step(&sol, it)?;
        let kept = best_amplitudes(&sol.s, &sol.w, channels, params);
        let kept_mse = kept.mse(channels, sigma2);
        let next_mse = next.solution.mse(channels, sigma2);
        let accepted = next_mse <= kept_mse + 1e-12;
        if let Some(r) = next.report.as_mut() {
            r.accepted = accepted;
            reports.push(r.clone());
        }
        let (cur, mse) = if accepted {
            (next.solution, next_mse)
        } else {
            log::debug!("outer iteration {it}: step raised MSE from {kept_mse:e} to {next_mse:e}; kept previous amplitudes");
            (kept, kept_mse)
        };
        dual = next.dual.or(dual);
        sol = cur;
        let prev = *traj.last().expect("trajectory starts non-empty");
        traj.push(mse);
        if prev - mse < opts.mse_tol * prev {
            converged = true;
            break;
        }
        if it == opts.max_outer {
            break;
        }
        let w = receive_beamformer(&sol.b, channels, sigma2)?;
        max_normal = max_normal.max(normal_equation_residual(&sol.b, channels, sigma2, &w));
        if w.norm() == 0.0 {
            break;
        }
        if opts.extrapolation {
            let (plain, mut best_mse) =
                refine_fixed_covariance(best_amplitudes(&sol.s, &w, channels, params), channels, params, opts)?;
            let mut best_ext = None;
            let dw = &w - &sol.w;
            let ds = prev_s.as_ref().map(|p| sol.s.sub(p));
            let mut beta = 1.0;
            while beta <= opts.max_extrapolation {
                let ext_w = &w + dw.scale(beta);
                let ext_s = match &ds {
                    Some(d) => feasible_covariance(&sol.s.add(&d.scale(beta)), params.power_w),
                    None => sol.s.clone(),
                };
                let (ext, e) = refine_fixed_covariance(
                    best_amplitudes(&ext_s, &ext_w, channels, params),
                    channels,
                    params,
                    opts,
                )?;
                if e >= best_mse {
                    break;
                }
                best_mse = e;
                best_ext = Some(ext);
                beta *= 2.0;
            }
            prev_s = Some(sol.s.clone());
            sol = best_ext.unwrap_or(plain);
            continue;
        }
        prev_s = Some(sol.s.clone());
        sol.w = w;
    }
    let kkt = match &dual {
        Some(d) => Some(kkt_audit(&sol, d, channels, params)?),
        None => None,
    };
    let report = SolverReport {
        mse_trajectory: traj,
        inner_reports: reports,
        kkt,
        dual,
        converged,
        iterations,
        max_normal_residual: max_normal,
    };
    Ok((sol, report))
}

/// Optimal amplitudes and energy covariance for a fixed receiver `w`.
#[derive(Debug, Clone)]
pub struct FixedReceiverSolution {
    pub s: HermitianMatrix,
    pub b_tilde: Vec<f64>,
    pub inner: InnerSolution,
    pub covariance: CovarianceReport,
}

impl FixedReceiverSolution {
    /// `sum_k (|w^H h_k| b_k - 1)^2`, the receiver-independent part of the
    /// objective without the noise term.
    pub fn misalignment(&self, w: &ComplexVector, channels: &ChannelSet) -> f64 {
        channels
            .effective_gains(w)
            .iter()
            .zip(&self.b_tilde)
            .map(|(a, b)| (a * b - 1.0).powi(2))
            .sum()
    }
}

/// Solves the convex amplitude / covariance problem at fixed `w` through its
/// dual, then recovers a covariance that powers the amplitudes.
pub fn solve_fixed_receiver(
    w: &ComplexVector,
    channels: &ChannelSet,
    params: &SystemParams,
    opts: &JointOptions,
) -> Result<FixedReceiverSolution> {
    let inner = solve_inner(w, channels, params, &opts.inner)?;
    let (s, b_tilde, covariance) = recover_covariance(w, channels, params, &inner, opts)?;
    Ok(FixedReceiverSolution {
        s,
        b_tilde,
        inner,
        covariance,
    })
}

/// One amplitude / covariance update at the current receiver.
fn joint_step(
    sol: &BeamformingSolution,
    iteration: usize,
    channels: &ChannelSet,
    params: &SystemParams,
    opts: &JointOptions,
) -> Result<Step> {
    let fixed = solve_fixed_receiver(&sol.w, channels, params, opts)?;
    let inner = fixed.inner;
    if !inner.converged {
        log::warn!("inner dual solve hit its iteration cap at outer iteration {iteration}");
    }
    let b = align_all(&sol.w, channels, &fixed.b_tilde);
    Ok(Step {
        solution: BeamformingSolution {
            s: fixed.s,
            w: sol.w.clone(),
            b,
            b_tilde: fixed.b_tilde,
        },
        report: Some(InnerReport {
            iteration,
            converged: inner.converged,
            iterations: inner.iterations,
            gap: inner.gap(),
            cuts: inner.cuts,
            covariance: fixed.covariance,
            accepted: true,
        }),
        dual: Some(inner.dual),
    })
}

/// Joint design from the isotropic starting point.
pub fn solve_joint(
    params: &SystemParams,
    channels: &ChannelSet,
    opts: &JointOptions,
) -> Result<(BeamformingSolution, SolverReport)> {
    let start = initial_point(params, channels)?;
    solve_joint_from(params, channels, start, opts)
}

/// Joint design from a given feasible solution. The returned MSE never
/// exceeds the MSE of `start`.
pub fn solve_joint_from(
    params: &SystemParams,
    channels: &ChannelSet,
    start: BeamformingSolution,
    opts: &JointOptions,
) -> Result<(BeamformingSolution, SolverReport)> {
    in_channel_span(params, channels, start, |p, ch, start| {
        alternate(p, ch, start, opts, |sol, it| joint_step(sol, it, ch, p, opts))
    })
}

/// Orthonormal basis `Q` of `span{h_k}` with the channels in its coordinates.
///
/// Replacing `S` by `Q^H S Q` keeps every harvested energy and does not raise
/// the trace, and the MMSE receiver always lies in the span, so the problem
/// is solved exactly in `r = rank(H)` dimensions and lifted back.
pub(crate) struct ChannelSpan {
    basis: DMatrix<Complex64>,
    pub channels: ChannelSet,
    pub params: SystemParams,
}

impl ChannelSpan {
    /// `None` when the channels already span the whole antenna space.
    pub fn new(channels: &ChannelSet, params: &SystemParams) -> Result<Option<Self>> {
        let m = channels.antennas();
        let k = channels.devices();
        if k >= m {
            return Ok(None);
        }
        let h = DMatrix::from_columns(&channels.h);
        let qr = h.qr();
        let r_diag: Vec<f64> = qr.r().diagonal().iter().map(|z| z.norm()).collect();
        let top = r_diag.iter().cloned().fold(0.0, f64::max);
        let rank = r_diag.iter().filter(|&&d| d > 1e-12 * top).count();
        // Householder QR; pivot-free, so keep the full k columns unless the
        // channels are exactly dependent.
        if rank < k {
            return Ok(None);
        }
        let basis = qr.q();
        let reduced: Vec<ComplexVector> = channels.h.iter().map(|hk| basis.adjoint() * hk).collect();
        let channels = ChannelSet::from_vectors(reduced, channels.distances_m.clone(), channels.rician_kappa)?;
        let params = SystemParams {
            antennas: k,
            ..*params
        };
        Ok(Some(Self { basis, channels, params }))
    }

    pub fn compress(&self, sol: &BeamformingSolution) -> BeamformingSolution {
        let w = self.basis.adjoint() * &sol.w;
        BeamformingSolution {
            s: HermitianMatrix::hermitian_part(self.basis.adjoint() * sol.s.as_matrix() * &self.basis),
            b: align_all(&w, &self.channels, &sol.b_tilde),
            w,
            b_tilde: sol.b_tilde.clone(),
        }
    }

    pub fn lift(&self, sol: BeamformingSolution) -> BeamformingSolution {
        BeamformingSolution {
            s: sol.s.congruence(&self.basis),
            w: &self.basis * &sol.w,
            ..sol
        }
    }
}

/// Runs `solve` in the coordinates of the channel span when that is smaller
/// than the antenna space, and re-audits the lifted solution.
pub(crate) fn in_channel_span(
    params: &SystemParams,
    channels: &ChannelSet,
    start: BeamformingSolution,
    solve: impl FnOnce(&SystemParams, &ChannelSet, BeamformingSolution) -> Result<(BeamformingSolution, SolverReport)>,
) -> Result<(BeamformingSolution, SolverReport)> {
    params.validate()?;
    channels.check_matches(params)?;
    start.check_shape(channels)?;
    let Some(span) = ChannelSpan::new(channels, params)? else {
        return solve(params, channels, start);
    };
    let (sol, mut report) = solve(&span.params, &span.channels, span.compress(&start))?;
    let sol = span.lift(sol);
    if let Some(d) = &report.dual {
        report.kkt = Some(kkt_audit(&sol, d, channels, params)?);
    }
    Ok((sol, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{dbm_to_watts, sample_channels, PathLossModel};
    use rand::{Rng, SeedableRng};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rvec(rng: &mut impl Rng, n: usize) -> ComplexVector {
        ComplexVector::from_fn(n, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
    }

    #[test]
    fn phase_align_examples() {
        let w = ComplexVector::from_vec(vec![c(1.0, 0.0)]);
        let h = ComplexVector::from_vec(vec![c(2.0, 0.0)]);
        assert_eq!(phase_align(&w, &h, 0.7), c(0.7, 0.0));
        let h = ComplexVector::from_vec(vec![c(0.0, 1.0)]);
        let b = phase_align(&w, &h, 1.0);
        assert!((b - c(0.0, -1.0)).norm() < 1e-15);
        assert!((w.dotc(&h) * b - c(1.0, 0.0)).norm() < 1e-15);
        let zero = ComplexVector::from_vec(vec![c(0.0, 0.0)]);
        assert_eq!(phase_align(&zero, &h, 1.0), c(0.0, 0.0));
    }

    #[test]
    fn phase_align_makes_gain_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let (w, h) = (rvec(&mut rng, 3), rvec(&mut rng, 3));
            let bt = rng.gen::<f64>();
            let g = w.dotc(&h) * phase_align(&w, &h, bt);
            assert!(g.im.abs() <= 1e-12 * g.norm());
            assert!((g.re - w.dotc(&h).norm() * bt).abs() <= 1e-12);
        }
    }

    #[test]
    fn receive_beamformer_examples() {
        let e1 = ComplexVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]);
        let ch = ChannelSet::from_vectors_unit(vec![e1.clone()]).unwrap();
        let w = receive_beamformer(&[c(1.0, 0.0)], &ch, 1.0).unwrap();
        assert!((w - e1.scale(0.5)).norm() < 1e-15);
        let w = receive_beamformer(&[c(0.0, 0.0)], &ch, 1.0).unwrap();
        assert_eq!(w.norm(), 0.0);
        assert!(receive_beamformer(&[c(1.0, 0.0)], &ch, 0.0).is_err());
    }

    #[test]
    fn receive_beamformer_is_a_local_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ch = ChannelSet::from_vectors_unit((0..3).map(|_| rvec(&mut rng, 4)).collect()).unwrap();
        let b: Vec<Complex64> = (0..3).map(|_| c(rng.gen(), rng.gen())).collect();
        let sigma2 = 0.3;
        let w = receive_beamformer(&b, &ch, sigma2).unwrap();
        assert!(normal_equation_residual(&b, &ch, sigma2, &w) < 1e-12);
        let base = compute_mse(&w, &b, &ch, sigma2);
        for _ in 0..1000 {
            let eps = 10f64.powf(rng.gen_range(-6.0..-1.0));
            let u = normalize(&rvec(&mut rng, 4)).scale(eps);
            assert!(compute_mse(&(&w + u), &b, &ch, sigma2) >= base - 1e-15);
        }
    }

    #[test]
    fn mse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ch = ChannelSet::from_vectors_unit((0..4).map(|_| rvec(&mut rng, 2)).collect()).unwrap();
        let b = vec![c(1.0, 0.0); 4];
        assert!((compute_mse(&ComplexVector::zeros(2), &b, &ch, 1.0) - 0.25).abs() < 1e-15);
        // one device, unit gain: only the noise term remains
        let h = ComplexVector::from_vec(vec![c(0.0, 2.0)]);
        let ch = ChannelSet::from_vectors_unit(vec![h.clone()]).unwrap();
        let w = ComplexVector::from_vec(vec![c(1.0, 0.0)]);
        let b = vec![phase_align(&w, &h, 0.5)];
        assert!((compute_mse(&w, &b, &ch, 0.3) - 0.3).abs() < 1e-15);
    }

    fn random_solution(rng: &mut impl Rng, m: usize, k: usize) -> (ChannelSet, BeamformingSolution) {
        let ch = ChannelSet::from_vectors_unit((0..k).map(|_| rvec(rng, m)).collect()).unwrap();
        let w = rvec(rng, m);
        let b_tilde: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() * 2.0).collect();
        let b = align_all(&w, &ch, &b_tilde);
        let s = HermitianMatrix::identity(m);
        (ch, BeamformingSolution { s, w, b, b_tilde })
    }

    #[test]
    fn empirical_mse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (ch, mut sol) = random_solution(&mut rng, 2, 4);
        sol.w = ComplexVector::zeros(2);
        sol.b = vec![c(0.0, 0.0); 4];
        let est = empirical_mse(&sol, &ch, 1.0, 100_000, 1, SymbolDistribution::Gaussian, Execution::Parallel).unwrap();
        assert!((est.estimate - 0.25).abs() < 3.0 * est.std_error, "{est:?}");

        // noiseless, perfectly aligned
        let (ch, mut sol) = random_solution(&mut rng, 3, 3);
        sol.b_tilde = ch.effective_gains(&sol.w).iter().map(|a| 1.0 / a).collect();
        sol.b = align_all(&sol.w, &ch, &sol.b_tilde);
        let est = empirical_mse(&sol, &ch, 0.0, 5000, 2, SymbolDistribution::Gaussian, Execution::Parallel).unwrap();
        assert!(est.estimate < 1e-25);
        assert!(empirical_mse(&sol, &ch, 0.0, 999, 2, SymbolDistribution::Gaussian, Execution::Parallel).is_err());
    }

    #[test]
    fn empirical_mse_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut inside = 0;
        let runs = 100;
        for seed in 0..runs {
            let (ch, sol) = random_solution(&mut rng, 3, 3);
            let sigma2 = 0.2;
            let exact = sol.mse(&ch, sigma2);
            let dist = if seed % 2 == 0 { SymbolDistribution::Gaussian } else { SymbolDistribution::Rademacher };
            let est = empirical_mse(&sol, &ch, sigma2, 20_000, seed, dist, Execution::Parallel).unwrap();
            if (est.estimate - exact).abs() <= 3.0 * est.std_error {
                inside += 1;
            }
        }
        assert!(inside >= 97, "{inside}/{runs}");
    }

    #[test]
    fn empirical_mse_is_independent_of_execution() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (ch, sol) = random_solution(&mut rng, 2, 2);
        let a = empirical_mse(&sol, &ch, 0.1, 10_000, 9, SymbolDistribution::Gaussian, Execution::Sequential).unwrap();
        let b = empirical_mse(&sol, &ch, 0.1, 10_000, 9, SymbolDistribution::Gaussian, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scalar_instance_has_closed_form() {
        let h = ComplexVector::from_vec(vec![c(1.0, 0.0)]);
        let ch = ChannelSet::from_vectors_unit(vec![h]).unwrap();
        let p = SystemParams::new(1, 1, 1.0, 1.0, 1.0, 0.5).unwrap();
        let (sol, report) = solve_joint(&p, &ch, &JointOptions::default()).unwrap();
        assert!(report.converged);
        assert!((sol.mse(&ch, 1.0) - 0.5).abs() < 1e-6, "{}", sol.mse(&ch, 1.0));
        assert!((sol.b_tilde[0] - 1.0).abs() < 1e-6);
        assert!((sol.s.trace() - 1.0).abs() < 1e-6);
    }

    fn desk_instance(seed: u64, m: usize, distances: &[f64], power_dbm: f64) -> (SystemParams, ChannelSet) {
        let k = distances.len();
        let p = SystemParams::new(m, k, dbm_to_watts(power_dbm), dbm_to_watts(-100.0), 0.8, 0.5).unwrap();
        let ch = sample_channels(&p, &PathLossModel::default(), distances, 0.0, seed).unwrap();
        (p, ch)
    }

    #[test]
    fn joint_solution_is_monotone_feasible_and_certified() {
        for seed in 0..5 {
            let (p, ch) = desk_instance(seed, 4, &[5.0, 10.0, 15.0, 20.0], 20.0);
            let (sol, report) = solve_joint(&p, &ch, &JointOptions::default()).unwrap();
            for pair in report.mse_trajectory.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-9);
            }
            assert!(report.converged);
            assert!(sol.feasibility(&ch, &p).max() <= 1e-8);
            let kkt = report.kkt.unwrap();
            assert!(kkt.max_residual() <= 1e-6, "seed {seed}: {kkt:?}");
            assert!(report.max_normal_residual <= 1e-10);
            for (k, h) in ch.h.iter().enumerate() {
                assert!(sol.b[k].norm() <= (p.harvest_gain() * sol.s.quad_form_re(h) / p.alpha2).sqrt() * (1.0 + 1e-8));
            }
        }
    }

    #[test]
    fn truncated_channel_inversion_structure() {
        let (p, ch) = desk_instance(3, 4, &[5.0, 10.0, 15.0, 20.0], 20.0);
        let (sol, report) = solve_joint(&p, &ch, &JointOptions::default()).unwrap();
        let dual = report.dual.unwrap();
        let gains = ch.effective_gains(&sol.w);
        for k in 0..4 {
            if dual.mu[k] == 0.0 {
                assert!((sol.b_tilde[k] * gains[k] - 1.0).abs() <= 1e-6);
            } else if dual.mu[k] > 1e-6 {
                let have = p.harvest_gain() * sol.s.quad_form_re(&ch.h[k]);
                let need = p.alpha2 * sol.b_tilde[k].powi(2);
                assert!((have - need).abs() <= 1e-6 * have, "device {k}: {have} vs {need}");
            }
        }
    }

    #[test]
    fn kkt_audit_controls() {
        let (p, ch) = desk_instance(1, 4, &[10.0; 4], 20.0);
        let (sol, report) = solve_joint(&p, &ch, &JointOptions::default()).unwrap();
        let dual = report.dual.clone().unwrap();
        let mut bad = sol.clone();
        bad.b_tilde.iter_mut().for_each(|b| *b *= 1.1);
        bad.b = align_all(&bad.w, &ch, &bad.b_tilde);
        assert!(kkt_audit(&bad, &dual, &ch, &p).unwrap().stationarity > 1e-3);

        // zero multipliers with slack constraints
        let zero = DualPoint::zeros(4);
        let mut slack = sol.clone();
        slack.b_tilde.iter_mut().for_each(|b| *b *= 0.5);
        let r = kkt_audit(&slack, &zero, &ch, &p).unwrap();
        assert_eq!(r.complementary_energy, 0.0);
        assert_eq!(r.complementary_power, 0.0);
        assert_eq!(r.trace_fs, 0.0);
    }

    #[test]
    fn noiseless_limit_gives_perfect_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let ch = ChannelSet::from_vectors_unit((0..2).map(|_| rvec(&mut rng, 3)).collect()).unwrap();
        let p = SystemParams::new(3, 2, 100.0, 1e-10, 0.8, 0.5).unwrap();
        let (sol, _) = solve_joint(&p, &ch, &JointOptions::default()).unwrap();
        assert!(sol.mse(&ch, p.noise_w) < 1e-6);
        for (h, b) in ch.h.iter().zip(&sol.b) {
            assert!((sol.w.dotc(h) * b - 1.0).norm() < 1e-3);
        }
    }

    #[test]
    fn beats_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ch = ChannelSet::from_vectors_unit((0..2).map(|_| rvec(&mut rng, 2)).collect()).unwrap();
        let p = SystemParams::new(2, 2, 1.0, 0.05, 0.8, 0.5).unwrap();
        let (sol, _) = solve_joint(&p, &ch, &JointOptions::default()).unwrap();
        let best = sol.mse(&ch, p.noise_w);
        for _ in 0..100_000 {
            let v = rvec(&mut rng, 2);
            let u = rvec(&mut rng, 2);
            let s = HermitianMatrix::outer(&v, 1.0).add(&HermitianMatrix::outer(&u, rng.gen()));
            let s = s.scale(p.power_w / s.trace());
            let w = rvec(&mut rng, 2).scale(rng.gen_range(0.1..10.0));
            let bt: Vec<f64> = ch
                .h
                .iter()
                .map(|h| rng.gen::<f64>() * (p.harvest_gain() * s.quad_form_re(h) / p.alpha2).sqrt())
                .collect();
            let b = align_all(&w, &ch, &bt);
            assert!(compute_mse(&w, &b, &ch, p.noise_w) >= best - 1e-12);
        }
    }
}
