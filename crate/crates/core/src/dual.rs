//! Lagrange dual of the joint amplitude / energy-covariance subproblem, solved
//! with a deep-cut ellipsoid method.
//!
//! For a fixed receive beamformer `w` the subproblem is
//!
//! ```text
//! min_{b >= 0, S >= 0}  sum_k (|w^H h_k| b_k - 1)^2
//! s.t.                  alpha2 b_k^2 <= alpha1 eta h_k^H S h_k,   tr(S) <= P
//! ```
//!
//! Its dual function is finite only where `F(mu) = nu I - sum_k alpha1 eta mu_k h_k h_k^H`
//! is PSD, and there it equals `sum_k c_k / (a_k^2 + c_k) - nu P` with
//! `a_k = |w^H h_k|`, `c_k = mu_k alpha2`.
//!
//! The search runs over the stacked vector `x = [mu; nu]`, rescaled per
//! coordinate by a bound on the dual optimum derived from a strictly feasible
//! primal point. Every center with `mu >= 0` also yields the feasible point
//! `(mu, alpha1 eta lambda_max(sum_k mu_k h_k h_k^H))`, which is used to keep the
//! running best dual value.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::Serialize;

use crate::channel::{ChannelSet, SystemParams};
use crate::error::{Error, Result};
use crate::numerics::{hermitian_eig, min_eigpair, ComplexVector, HermitianMatrix};

/// Multipliers of the energy constraints (`mu`) and of the power budget (`nu`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualPoint {
    pub mu: Vec<f64>,
    pub nu: f64,
}

impl DualPoint {
    pub fn zeros(k: usize) -> Self {
        Self {
            mu: vec![0.0; k],
            nu: 0.0,
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.nu >= 0.0 && self.mu.iter().all(|&m| m >= 0.0)
    }

    pub fn stacked(&self) -> Vec<f64> {
        let mut x = self.mu.clone();
        x.push(self.nu);
        x
    }

    pub fn from_stacked(x: &[f64]) -> Self {
        let (mu, nu) = x.split_at(x.len() - 1);
        Self {
            mu: mu.to_vec(),
            nu: nu[0],
        }
    }
}

/// `|w^H h| / (|w^H h|^2 + mu_k alpha2)`, zero when the effective gain vanishes.
pub fn amplitude_from_dual(w: &ComplexVector, h: &ComplexVector, mu_k: f64, alpha2: f64) -> f64 {
    amplitude(w.dotc(h).norm(), mu_k, alpha2)
}

pub(crate) fn amplitude(gain: f64, mu_k: f64, alpha2: f64) -> f64 {
    if gain == 0.0 {
        0.0
    } else {
        gain / (gain * gain + mu_k * alpha2)
    }
}

/// Per-device term `min_b (a b - 1)^2 + c b^2 = c / (a^2 + c)`.
fn device_term(gain: f64, mu_k: f64, alpha2: f64) -> f64 {
    if gain == 0.0 {
        return 1.0;
    }
    let c = mu_k * alpha2;
    c / (gain * gain + c)
}

/// `F(mu) = nu I - sum_k alpha1 eta mu_k h_k h_k^H`
pub fn build_f(dual: &DualPoint, channels: &ChannelSet, alpha1: f64, eta: f64) -> HermitianMatrix {
    let mut f = HermitianMatrix::scaled_identity(channels.antennas(), dual.nu);
    for (hk, &mu) in channels.h.iter().zip(&dual.mu) {
        if mu != 0.0 {
            f.add_outer(hk, -alpha1 * eta * mu);
        }
    }
    f
}

fn psd_tolerance(f: &HermitianMatrix) -> f64 {
    1e-9 * f.max_abs()
}

fn check_dual_feasible(dual: &DualPoint, channels: &ChannelSet, params: &SystemParams) -> Result<()> {
    if !dual.is_nonnegative() {
        return Err(Error::InvalidParameter("dual variables must be nonnegative".into()));
    }
    let f = build_f(dual, channels, params.alpha1, params.eta);
    let (lmin, _) = min_eigpair(&f);
    if lmin < -psd_tolerance(&f) {
        return Err(Error::InfeasibleDualPoint { lambda_min: lmin });
    }
    Ok(())
}

/// Dual function value `g(mu, nu)` at a point with `F(mu)` PSD.
pub fn dual_value(dual: &DualPoint, w: &ComplexVector, channels: &ChannelSet, params: &SystemParams) -> Result<f64> {
    check_dual_feasible(dual, channels, params)?;
    let gains = channels.effective_gains(w);
    Ok(dual_value_unchecked(&gains, &dual.mu, dual.nu, params))
}

fn dual_value_unchecked(gains: &[f64], mu: &[f64], nu: f64, params: &SystemParams) -> f64 {
    let sum: f64 = gains
        .iter()
        .zip(mu)
        .map(|(&a, &m)| device_term(a, m, params.alpha2))
        .sum();
    sum - nu * params.power_w
}

/// Supergradient `[alpha2 b_1^2, ..., alpha2 b_K^2, -P]` of the concave dual function.
pub fn objective_subgradient(
    dual: &DualPoint,
    w: &ComplexVector,
    channels: &ChannelSet,
    params: &SystemParams,
) -> Result<Vec<f64>> {
    check_dual_feasible(dual, channels, params)?;
    let mut s: Vec<f64> = channels
        .h
        .iter()
        .zip(&dual.mu)
        .map(|(hk, &mu)| {
            let b = amplitude_from_dual(w, hk, mu, params.alpha2);
            params.alpha2 * b * b
        })
        .collect();
    s.push(-params.power_w);
    Ok(s)
}

/// Cut information for the constraint `F(mu) >= 0`.
#[derive(Debug, Clone)]
pub struct FeasibilityCut {
    /// `lambda_min(F)`; negative means the point is infeasible.
    pub violation: f64,
    /// Unit eigenvector of the smallest eigenvalue.
    pub delta: ComplexVector,
    /// Gradient of `c(mu, nu) = -delta^H F(mu) delta`:
    /// `[alpha1 eta |delta^H h_1|^2, ..., alpha1 eta |delta^H h_K|^2, -delta^H delta]`.
    pub gradient: Vec<f64>,
}

pub fn feasibility_cut(dual: &DualPoint, channels: &ChannelSet, params: &SystemParams) -> FeasibilityCut {
    let f = build_f(dual, channels, params.alpha1, params.eta);
    let (violation, delta) = min_eigpair(&f);
    let g = params.harvest_gain();
    let mut gradient: Vec<f64> = channels.h.iter().map(|hk| g * delta.dotc(hk).norm_sqr()).collect();
    gradient.push(-delta.norm_squared());
    FeasibilityCut {
        violation,
        delta,
        gradient,
    }
}

/// Ellipsoid `{z : (z - c)^T Q^{-1} (z - c) <= 1}`, stored through a factor
/// `Q = E E^T` so that the shape stays positive semidefinite under rounding.
#[derive(Debug, Clone)]
pub struct EllipsoidState {
    pub center: DVector<f64>,
    factor: DMatrix<f64>,
    pub iteration: usize,
}

/// Result of applying one cut.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CutOutcome {
    Applied { depth: f64 },
    /// The kept halfspace misses the ellipsoid (depth >= 1).
    Empty,
    /// Numerical breakdown (`g^T Q g` is zero or not finite).
    Degenerate,
}

impl EllipsoidState {
    pub fn ball(center: DVector<f64>, radius: f64) -> Self {
        let n = center.len();
        Self {
            center,
            factor: DMatrix::from_diagonal_element(n, n, radius),
            iteration: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// The shape matrix `Q`.
    pub fn shape(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }

    /// Keeps `{z : g^T (z - c) + h <= 0}` with `h >= 0` (deep cut).
    pub fn cut(&mut self, g: &DVector<f64>, h: f64) -> CutOutcome {
        let n = self.dim() as f64;
        let p = self.factor.transpose() * g;
        let root = p.norm();
        if !(root > 0.0) || !root.is_finite() {
            return CutOutcome::Degenerate;
        }
        let alpha = (h / root).max(0.0);
        if alpha >= 1.0 {
            return CutOutcome::Empty;
        }
        let p = p.unscale(root);
        // Q g / sqrt(g^T Q g)
        let ep = &self.factor * &p;
        let step = (1.0 + n * alpha) / (n + 1.0);
        self.center -= ep.scale(step);
        let shrink = n * n / (n * n - 1.0) * (1.0 - alpha * alpha);
        let rank_one = 2.0 * (1.0 + n * alpha) / ((n + 1.0) * (1.0 + alpha));
        // I - rank_one p p^T = (I - gamma p p^T)^2
        let gamma = 1.0 - (1.0 - rank_one).max(0.0).sqrt();
        self.factor.ger(-gamma, &ep, &p, 1.0);
        self.factor *= shrink.sqrt();
        self.iteration += 1;
        CutOutcome::Applied { depth: alpha }
    }

    /// `sqrt(lambda_max(Q))`, the largest semi-axis.
    pub fn radius(&self) -> f64 {
        let eig = SymmetricEigen::new(self.shape());
        eig.eigenvalues.iter().fold(0.0_f64, |a, &b| a.max(b)).max(0.0).sqrt()
    }

    /// `tr(Q)`, an upper bound on `radius()^2`.
    pub fn shape_trace(&self) -> f64 {
        self.factor.norm_squared()
    }

    pub fn min_shape_eigenvalue(&self) -> f64 {
        let eig = SymmetricEigen::new(self.shape());
        eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b))
    }

    /// `0.5 * log det Q` up to the unit-ball constant.
    pub fn log_volume(&self) -> f64 {
        let qr = self.factor.clone().qr();
        qr.r().diagonal().iter().map(|d| d.abs().ln()).sum()
    }
}

/// Log-volume reduction of a central cut in dimension `n`.
pub fn central_cut_log_volume_ratio(n: usize) -> f64 {
    let n = n as f64;
    0.5 * (n * (n * n / (n * n - 1.0)).ln() + ((n - 1.0) / (n + 1.0)).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InnerOptions {
    /// Stop once the largest semi-axis of the (normalized) ellipsoid falls
    /// below `radius_tol * (1 + |center|)`.
    pub radius_tol: f64,
    /// Iteration cap; `None` means `1000 (K + 1)^2`.
    pub max_iter: Option<usize>,
    /// Multiplies the initial ball radius.
    pub radius_scale: f64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            radius_tol: 1e-9,
            max_iter: None,
            radius_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CutCounts {
    pub objective: usize,
    pub psd: usize,
    pub sign: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct InnerSolution {
    pub b_tilde: Vec<f64>,
    pub dual: DualPoint,
    pub dual_value: f64,
    /// `sum_k (|w^H h_k| b_k - 1)^2` at `b_tilde`.
    pub primal_value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub cuts: CutCounts,
    /// Running best dual value after each iteration.
    #[serde(skip)]
    pub best_trace: Vec<f64>,
}

impl InnerSolution {
    pub fn gap(&self) -> f64 {
        self.primal_value - self.dual_value
    }
}

/// Per-coordinate upper bounds on the dual optimum from the strictly feasible
/// primal point `S = P/(2M) I`, `b_k = min(1/a_k, sqrt(e_k / (2 alpha2)))`.
/// For any such point `mu_k^* s_k + nu^* s_nu <= f(b) - p^* <= f(b)`.
fn dual_bounds(gains: &[f64], active: &[usize], channels: &ChannelSet, params: &SystemParams) -> (Vec<f64>, f64, f64) {
    let m = params.antennas as f64;
    let s_bar = params.power_w / (2.0 * m);
    let mut f_bar = 0.0;
    let mut slacks = Vec::with_capacity(active.len());
    for &k in active {
        let a = gains[k];
        let e = params.harvest_gain() * s_bar * channels.h[k].norm_squared();
        let b = (1.0 / a).min((e / (2.0 * params.alpha2)).sqrt());
        f_bar += (a * b - 1.0).powi(2);
        slacks.push(e - params.alpha2 * b * b);
    }
    let mu_bounds = slacks.iter().map(|s| f_bar / s).collect();
    (mu_bounds, f_bar / (params.power_w / 2.0), f_bar)
}

/// Top eigenpair of `G(mu) = sum_k mu_k h_k h_k^H` restricted to the active
/// devices, reported as `(lambda_max, |delta^H h_k|^2 for active k)`.
struct TopEigen<'a> {
    h: Vec<&'a ComplexVector>,
    /// Gram matrix `h_i^H h_j`, used when there are fewer devices than antennas.
    gram: Option<DMatrix<Complex64>>,
}

impl<'a> TopEigen<'a> {
    fn new(channels: &'a ChannelSet, active: &[usize]) -> Self {
        let h: Vec<&ComplexVector> = active.iter().map(|&k| &channels.h[k]).collect();
        let gram = (h.len() <= channels.antennas()).then(|| {
            DMatrix::from_fn(h.len(), h.len(), |i, j| h[i].dotc(h[j]))
        });
        Self { h, gram }
    }

    fn eval(&self, mu: &[f64]) -> (f64, Vec<f64>) {
        let n = self.h.len();
        match &self.gram {
            Some(gram) => {
                let r: Vec<f64> = mu.iter().map(|m| m.max(0.0).sqrt()).collect();
                let a = DMatrix::from_fn(n, n, |i, j| gram[(i, j)] * (r[i] * r[j]));
                let eig = hermitian_eig(&HermitianMatrix::hermitian_part(a));
                let lam = eig.values[n - 1];
                if lam <= 0.0 {
                    return (0.0, self.fallback_projection());
                }
                let v = eig.vector(n - 1);
                // delta = H D^{1/2} v / sqrt(lam); delta^H h_k = sum_j r_j conj(v_j) gram_jk / sqrt(lam)
                let proj = (0..n)
                    .map(|k| {
                        let z: Complex64 = (0..n).map(|j| v[j].conj() * gram[(j, k)] * r[j]).sum();
                        z.norm_sqr() / lam
                    })
                    .collect();
                (lam, proj)
            }
            None => {
                let m = self.h[0].len();
                let mut g = HermitianMatrix::zeros(m);
                for (hk, &mu) in self.h.iter().zip(mu) {
                    if mu > 0.0 {
                        g.add_outer(hk, mu);
                    }
                }
                let eig = hermitian_eig(&g);
                let lam = eig.values[m - 1].max(0.0);
                let d = eig.vector(m - 1);
                (lam, self.h.iter().map(|hk| d.dotc(hk).norm_sqr()).collect())
            }
        }
    }

    /// `delta = e_1` when `G = 0`; any unit vector is a valid eigenvector.
    fn fallback_projection(&self) -> Vec<f64> {
        self.h.iter().map(|hk| hk[0].norm_sqr()).collect()
    }
}

/// Cut depth reduced by a few rounding errors of quantities of size `scale`,
/// so that a depth that is pure rounding noise never declares the localization
/// set empty.
fn shallow(depth: f64, scale: f64) -> f64 {
    (depth - 8.0 * f64::EPSILON * scale).max(0.0)
}

/// Maximizes the dual function over `{mu >= 0, nu >= 0, F(mu) >= 0}` and
/// returns the amplitudes recovered from the best dual point.
pub fn solve_inner(
    w: &ComplexVector,
    channels: &ChannelSet,
    params: &SystemParams,
    opts: &InnerOptions,
) -> Result<InnerSolution> {
    channels.check_matches(params)?;
    if w.norm() == 0.0 {
        return Err(Error::InvalidParameter("receive beamformer is zero".into()));
    }
    let k_total = channels.devices();
    let gains = channels.effective_gains(w);
    let active: Vec<usize> = (0..k_total).filter(|&k| gains[k] > 0.0).collect();
    let (mu_bounds, nu_bound, f_bar) = dual_bounds(&gains, &active, channels, params);

    let finish = |mu: Vec<f64>, nu: f64, converged, iterations, cuts, best_trace| {
        let b_tilde: Vec<f64> = gains
            .iter()
            .zip(&mu)
            .map(|(&a, &m)| amplitude(a, m, params.alpha2))
            .collect();
        let primal_value = gains.iter().zip(&b_tilde).map(|(a, b)| (a * b - 1.0).powi(2)).sum();
        let dual_value = dual_value_unchecked(&gains, &mu, nu, params);
        InnerSolution {
            b_tilde,
            dual: DualPoint { mu, nu },
            dual_value,
            primal_value,
            converged,
            iterations,
            cuts,
            best_trace,
        }
    };

    // Channel inversion is achievable strictly inside the feasible set: the
    // optimum is zero and all multipliers vanish.
    if active.is_empty() || f_bar == 0.0 {
        return Ok(finish(vec![0.0; k_total], 0.0, true, 0, CutCounts::default(), Vec::new()));
    }

    let n = active.len() + 1;
    let mut scale = mu_bounds;
    scale.push(nu_bound);
    let top = TopEigen::new(channels, &active);
    let hg = params.harvest_gain();
    let power = params.power_w;
    let active_gains: Vec<f64> = active.iter().map(|&k| gains[k]).collect();

    let eval_mu = |y: &DVector<f64>| -> Vec<f64> { (0..n - 1).map(|i| y[i] * scale[i]).collect() };
    let value_at = |mu: &[f64], nu: f64| -> f64 {
        active_gains
            .iter()
            .zip(mu)
            .map(|(&a, &m)| device_term(a, m, params.alpha2))
            .sum::<f64>()
            - nu * power
    };

    let mut state = EllipsoidState::ball(
        DVector::from_element(n, 0.5),
        0.5 * (n as f64).sqrt() * opts.radius_scale,
    );
    let max_iter = opts.max_iter.unwrap_or(1000 * (k_total + 1) * (k_total + 1));
    let mut best_mu = vec![0.0; n - 1];
    let mut best_val = value_at(&best_mu, 0.0);
    let mut best_trace = Vec::new();
    let mut cuts = CutCounts::default();
    let mut converged = false;
    let mut iterations = 0;
    let mut grad = DVector::zeros(n);

    while iterations < max_iter {
        iterations += 1;
        let y = &state.center;
        // sign constraints first
        let (imin, ymin) = y
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        let outcome = if ymin < 0.0 {
            cuts.sign += 1;
            grad.fill(0.0);
            grad[imin] = -1.0;
            state.cut(&grad, -ymin)
        } else {
            let mu = eval_mu(y);
            let nu = y[n - 1] * scale[n - 1];
            let (lam, proj) = top.eval(&mu);
            let nu_tight = hg * lam;
            let tight_val = value_at(&mu, nu_tight);
            if tight_val > best_val {
                best_val = tight_val;
                best_mu.clone_from(&mu);
            }
            let violation = nu - nu_tight;
            if violation < 0.0 {
                cuts.psd += 1;
                for i in 0..n - 1 {
                    grad[i] = hg * proj[i] * scale[i];
                }
                grad[n - 1] = -scale[n - 1];
                state.cut(&grad, shallow(-violation, nu))
            } else {
                cuts.objective += 1;
                let val = value_at(&mu, nu);
                for i in 0..n - 1 {
                    let b = amplitude(active_gains[i], mu[i], params.alpha2);
                    grad[i] = -params.alpha2 * b * b * scale[i];
                }
                grad[n - 1] = power * scale[n - 1];
                state.cut(&grad, shallow(best_val - val, best_val.abs() + val.abs()))
            }
        };
        best_trace.push(best_val);
        match outcome {
            CutOutcome::Applied { .. } => {}
            CutOutcome::Empty | CutOutcome::Degenerate => {
                converged = true;
                break;
            }
        }
        let limit = opts.radius_tol * (1.0 + state.center.norm());
        // tr(Q) >= lambda_max(Q); only pay for the eigendecomposition near the end
        if state.shape_trace() < (n as f64) * limit * limit && state.radius() < limit {
            converged = true;
            break;
        }
    }

    let (lam, _) = top.eval(&best_mu);
    let nu = hg * lam;
    let mut mu_full = vec![0.0; k_total];
    for (i, &k) in active.iter().enumerate() {
        mu_full[k] = best_mu[i];
    }
    Ok(finish(mu_full, nu, converged, iterations, cuts, best_trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rvec(rng: &mut impl Rng, n: usize) -> ComplexVector {
        ComplexVector::from_fn(n, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
    }

    fn unit_params(m: usize, k: usize) -> SystemParams {
        SystemParams::new(m, k, 1.0, 1.0, 0.8, 0.5).unwrap()
    }

    fn random_instance(rng: &mut impl Rng, m: usize, k: usize) -> (ChannelSet, ComplexVector) {
        let h = (0..k).map(|_| rvec(rng, m)).collect();
        (ChannelSet::from_vectors_unit(h).unwrap(), rvec(rng, m))
    }

    #[test]
    fn amplitude_examples() {
        let w = ComplexVector::from_vec(vec![c(1.0, 0.0)]);
        let h = ComplexVector::from_vec(vec![c(0.0, 1.0)]);
        assert!((amplitude_from_dual(&w, &h, 0.0, 0.5) - 1.0).abs() < 1e-15);
        assert!((amplitude_from_dual(&w, &h, 2.0, 0.5) - 0.5).abs() < 1e-15);
        let zero = ComplexVector::from_vec(vec![c(0.0, 0.0)]);
        assert_eq!(amplitude_from_dual(&zero, &h, 1.0, 0.5), 0.0);
    }

    #[test]
    fn amplitude_minimizes_the_scalar_subproblem() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (w, h) = (rvec(&mut rng, 3), rvec(&mut rng, 3));
            let mu = rng.gen::<f64>() * 3.0;
            let alpha2 = 0.5;
            let a = w.dotc(&h).norm();
            let b = amplitude_from_dual(&w, &h, mu, alpha2);
            let obj = |b: f64| (a * b - 1.0).powi(2) + mu * alpha2 * b * b;
            let hi = 10.0 / a;
            let grid_best = (0..=200_000)
                .map(|i| obj(hi * f64::from(i) / 200_000.0))
                .fold(f64::INFINITY, f64::min);
            assert!(obj(b) <= grid_best + 1e-12);
        }
    }

    #[test]
    fn build_f_examples() {
        let e1 = ComplexVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]);
        let ch = ChannelSet::from_vectors_unit(vec![e1]).unwrap();
        let f = build_f(&DualPoint { mu: vec![0.0], nu: 1.0 }, &ch, 0.5, 0.8);
        assert!(f.sub(&HermitianMatrix::identity(2)).max_abs() < 1e-15);
        // alpha1 eta mu = 1
        let f = build_f(&DualPoint { mu: vec![2.5], nu: 2.0 }, &ch, 0.5, 0.8);
        assert!(f.sub(&HermitianMatrix::from_real_diagonal(&[1.0, 2.0])).max_abs() < 1e-15);
    }

    #[test]
    fn build_f_matches_naive_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ch, _) = random_instance(&mut rng, 3, 4);
        let dual = DualPoint {
            mu: (0..4).map(|_| rng.gen::<f64>()).collect(),
            nu: 2.0,
        };
        let f = build_f(&dual, &ch, 0.4, 0.7);
        for i in 0..3 {
            for j in 0..3 {
                let mut want = if i == j { c(2.0, 0.0) } else { c(0.0, 0.0) };
                for (hk, &mu) in ch.h.iter().zip(&dual.mu) {
                    want -= hk[i] * hk[j].conj() * (0.4 * 0.7 * mu);
                }
                assert!((f.as_matrix()[(i, j)] - want).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn dual_value_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (ch, w) = random_instance(&mut rng, 2, 3);
        let p = unit_params(2, 3);
        assert!(dual_value(&DualPoint::zeros(3), &w, &ch, &p).unwrap().abs() < 1e-15);
        let v = dual_value(&DualPoint { mu: vec![0.0; 3], nu: 0.7 }, &w, &ch, &p).unwrap();
        assert!((v + 0.7 * p.power_w).abs() < 1e-15);
        // infeasible: large mu, no nu
        let err = dual_value(&DualPoint { mu: vec![1.0; 3], nu: 0.0 }, &w, &ch, &p);
        assert!(matches!(err, Err(Error::InfeasibleDualPoint { .. })));
    }

    /// Objective of the primal subproblem with the energy constraints checked.
    fn primal_objective(b: &[f64], s: &HermitianMatrix, w: &ComplexVector, ch: &ChannelSet, p: &SystemParams) -> Option<f64> {
        if s.trace() > p.power_w * (1.0 + 1e-12) {
            return None;
        }
        let mut obj = 0.0;
        for ((hk, &bk), a) in ch.h.iter().zip(b).zip(ch.effective_gains(w)) {
            if p.alpha2 * bk * bk > p.harvest_gain() * s.quad_form_re(hk) {
                return None;
            }
            obj += (a * bk - 1.0).powi(2);
        }
        Some(obj)
    }

    #[test]
    fn weak_duality_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (ch, w) = random_instance(&mut rng, 3, 3);
            let p = unit_params(3, 3);
            // feasible primal: random PSD S with trace <= P, b at or below its cap
            let v = rvec(&mut rng, 3);
            let s = HermitianMatrix::outer(&v, 1.0)
                .add(&HermitianMatrix::scaled_identity(3, rng.gen::<f64>()));
            let s = s.scale(p.power_w * rng.gen::<f64>() / s.trace());
            let b: Vec<f64> = ch
                .h
                .iter()
                .map(|hk| rng.gen::<f64>() * (p.harvest_gain() * s.quad_form_re(hk) / p.alpha2).sqrt())
                .collect();
            let primal = primal_objective(&b, &s, &w, &ch, &p).unwrap();
            // feasible dual: random mu, nu pushed into the PSD region
            let mu: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 5.0).collect();
            let mut dual = DualPoint { mu, nu: 0.0 };
            let lam = -min_eigpair(&build_f(&dual, &ch, p.alpha1, p.eta)).0;
            dual.nu = lam.max(0.0) * (1.0 + rng.gen::<f64>());
            let g = dual_value(&dual, &w, &ch, &p).unwrap();
            assert!(g <= primal + 1e-12, "g = {g}, primal = {primal}");
        }
    }

    #[test]
    fn objective_subgradient_examples() {
        // |w^H h_k| = 1 for every device
        let w = ComplexVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]);
        let h = vec![
            ComplexVector::from_vec(vec![c(0.0, 1.0), c(0.3, 0.0)]),
            ComplexVector::from_vec(vec![c(1.0, 0.0), c(0.0, -2.0)]),
        ];
        let ch = ChannelSet::from_vectors_unit(h).unwrap();
        let p = SystemParams::new(2, 2, 3.0, 1.0, 0.8, 0.4).unwrap();
        let s = objective_subgradient(&DualPoint { mu: vec![0.0, 0.0], nu: 1.0 }, &w, &ch, &p).unwrap();
        assert!((s[0] - 0.6).abs() < 1e-15 && (s[1] - 0.6).abs() < 1e-15);
        assert_eq!(s[2], -3.0);
    }

    #[test]
    fn objective_subgradient_is_a_supergradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (ch, w) = random_instance(&mut rng, 2, 3);
        let p = unit_params(2, 3);
        for _ in 0..50 {
            let mu: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
            let x = DualPoint { mu, nu: 50.0 };
            let gx = dual_value(&x, &w, &ch, &p).unwrap();
            let s = objective_subgradient(&x, &w, &ch, &p).unwrap();
            let eps = 1e-3;
            let dir: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
            let y = DualPoint::from_stacked(&x.stacked().iter().zip(&dir).map(|(a, d)| a + eps * d).collect::<Vec<_>>());
            let gy = dual_value(&y, &w, &ch, &p).unwrap();
            let lin: f64 = s.iter().zip(&dir).map(|(a, d)| a * d * eps).sum();
            assert!(gy <= gx + lin + 1e-12);
            // and the error is second order
            assert!((gy - gx - lin).abs() < 1e-4);
        }
    }

    #[test]
    fn feasibility_cut_examples() {
        let e1 = ComplexVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]);
        let ch = ChannelSet::from_vectors_unit(vec![e1]).unwrap();
        let p = unit_params(2, 1); // alpha1 eta = 0.4
        let cut = feasibility_cut(&DualPoint { mu: vec![0.0], nu: 1.0 }, &ch, &p);
        assert!((cut.violation - 1.0).abs() < 1e-15);
        assert!((cut.gradient[1] + 1.0).abs() < 1e-15);

        // alpha1 eta mu = 2, nu = 1 -> F = diag(-1, 1)
        let dual = DualPoint { mu: vec![5.0], nu: 1.0 };
        let cut = feasibility_cut(&dual, &ch, &p);
        assert!((cut.violation + 1.0).abs() < 1e-14);
        assert!((cut.delta[0].norm() - 1.0).abs() < 1e-12);
        assert!((cut.gradient[0] - 0.4).abs() < 1e-14);
        assert!((cut.gradient[1] + 1.0).abs() < 1e-14);
        let (lmin, _) = min_eigpair(&build_f(&dual, &ch, p.alpha1, p.eta));
        assert!((lmin - cut.violation).abs() < 1e-14);
    }

    #[test]
    fn feasibility_gradient_is_exact_for_fixed_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (ch, _) = random_instance(&mut rng, 3, 4);
        let p = unit_params(3, 4);
        for _ in 0..20 {
            let x = DualPoint {
                mu: (0..4).map(|_| rng.gen::<f64>() * 2.0).collect(),
                nu: rng.gen::<f64>(),
            };
            let cut = feasibility_cut(&x, &ch, &p);
            let c_at = |d: &DualPoint| -build_f(d, &ch, p.alpha1, p.eta).quad_form_re(&cut.delta);
            let delta: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() - 0.5).collect();
            let y = DualPoint::from_stacked(&x.stacked().iter().zip(&delta).map(|(a, d)| a + d).collect::<Vec<_>>());
            let lin: f64 = cut.gradient.iter().zip(&delta).map(|(g, d)| g * d).sum();
            assert!((c_at(&y) - (c_at(&x) + lin)).abs() < 1e-12);
            assert!((c_at(&x) + cut.violation).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_top_eigen_agrees_with_dense_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (m, k) in [(4, 2), (2, 4), (3, 3)] {
            let (ch, _) = random_instance(&mut rng, m, k);
            let p = unit_params(m, k);
            let mu: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
            let active: Vec<usize> = (0..k).collect();
            let (lam, proj) = TopEigen::new(&ch, &active).eval(&mu);
            let cut = feasibility_cut(&DualPoint { mu: mu.clone(), nu: 0.0 }, &ch, &p);
            assert!((p.harvest_gain() * lam + cut.violation).abs() < 1e-12);
            for i in 0..k {
                assert!((p.harvest_gain() * proj[i] - cut.gradient[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ellipsoid_cut_shrinks_volume_and_stays_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 2..6 {
            let mut e = EllipsoidState::ball(DVector::from_element(n, 0.5), 2.0);
            let central = central_cut_log_volume_ratio(n);
            for _ in 0..200 {
                let g = DVector::from_fn(n, |_, _| rng.gen::<f64>() - 0.5);
                let depth = if rng.gen::<bool>() { 0.0 } else { rng.gen::<f64>() * 0.1 * (g.dot(&(e.shape() * &g))).sqrt() };
                let before = e.log_volume();
                if let CutOutcome::Applied { .. } = e.cut(&g, depth) {
                    let ratio = e.log_volume() - before;
                    assert!(ratio <= central + 1e-9, "ratio {ratio} central {central}");
                    assert!(e.min_shape_eigenvalue() > 0.0);
                }
            }
        }
    }

    #[test]
    fn factored_update_matches_explicit_shape_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 4;
        let mut e = EllipsoidState::ball(DVector::zeros(n), 1.0);
        for _ in 0..30 {
            let g = DVector::from_fn(n, |_, _| rng.gen::<f64>() - 0.5);
            let q = e.shape();
            let qg = &q * &g;
            let root = g.dot(&qg).sqrt();
            let alpha = rng.gen::<f64>() * 0.5;
            let nf = n as f64;
            let b = qg.unscale(root);
            let expected = (&q - &b * b.transpose() * (2.0 * (1.0 + nf * alpha) / ((nf + 1.0) * (1.0 + alpha))))
                * (nf * nf / (nf * nf - 1.0) * (1.0 - alpha * alpha));
            let center = &e.center - &b * ((1.0 + nf * alpha) / (nf + 1.0));
            assert!(matches!(e.cut(&g, alpha * root), CutOutcome::Applied { .. }));
            assert!((e.shape() - &expected).abs().max() <= 1e-12 * expected.abs().max());
            assert!((&e.center - center).norm() <= 1e-12);
        }
    }

    #[test]
    fn deep_cut_keeps_only_the_requested_halfspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 3;
        let e0 = EllipsoidState::ball(DVector::zeros(n), 1.0);
        let g = DVector::from_vec(vec![1.0, 0.5, -0.2]);
        let h = 0.3 * g.norm();
        let mut e1 = e0.clone();
        assert!(matches!(e1.cut(&g, h), CutOutcome::Applied { .. }));
        let inv = e1.shape().try_inverse().unwrap();
        for _ in 0..20_000 {
            let z = DVector::from_fn(n, |_, _| 2.0 * rng.gen::<f64>() - 1.0);
            let in_old = z.norm() <= 1.0;
            let kept = g.dot(&z) + h <= 0.0;
            if in_old && kept {
                let d = &z - &e1.center;
                assert!(d.dot(&(&inv * &d)) <= 1.0 + 1e-9);
            }
        }
        // too deep: empty
        let mut e2 = e0.clone();
        assert_eq!(e2.cut(&g, 1.5 * g.norm()), CutOutcome::Empty);
    }

    #[test]
    fn slack_constraints_give_channel_inversion() {
        // Large budget and strong channels: every device can invert its channel.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (ch, w) = random_instance(&mut rng, 3, 3);
        let p = SystemParams::new(3, 3, 1e6, 1.0, 0.8, 0.5).unwrap();
        let sol = solve_inner(&w, &ch, &p, &InnerOptions::default()).unwrap();
        assert!(sol.converged);
        for ((hk, b), mu) in ch.h.iter().zip(&sol.b_tilde).zip(&sol.dual.mu) {
            assert_eq!(*mu, 0.0);
            assert!((b - 1.0 / w.dotc(hk).norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_instance_binds_the_budget() {
        // M = K = 1, h = w = 1, alpha1 = alpha2 = 0.5, eta = 1, P = 1.
        // The cap is b <= sqrt(S) <= 1 and channel inversion wants b = 1.
        let eta = 1.0;
        let ch = ChannelSet::from_vectors_unit(vec![ComplexVector::from_vec(vec![c(1.0, 0.0)])]).unwrap();
        let p = SystemParams::new(1, 1, 1.0, 1.0, eta, 0.5).unwrap();
        let w = ComplexVector::from_vec(vec![c(1.0, 0.0)]);
        let sol = solve_inner(&w, &ch, &p, &InnerOptions::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.b_tilde[0] - 1.0).abs() < 1e-6);
        assert!(sol.gap().abs() < 1e-8);
    }

    #[test]
    fn best_dual_value_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (ch, w) = random_instance(&mut rng, 3, 4);
        let p = SystemParams::new(3, 4, 0.05, 1.0, 0.8, 0.5).unwrap();
        let sol = solve_inner(&w, &ch, &p, &InnerOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.best_trace.windows(2).all(|v| v[1] >= v[0]));
        assert!(sol.dual.mu.iter().any(|&m| m > 0.0));
    }

    #[test]
    fn dual_optimum_matches_grid_search() {
        // M = 2, K = 2. The dual optimum has nu = alpha1 eta lambda_max(G(mu)),
        // so a 2-D grid over mu (then refined) recovers it independently.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let (ch, w) = random_instance(&mut rng, 2, 2);
            let p = SystemParams::new(2, 2, 0.1, 1.0, 0.8, 0.5).unwrap();
            let sol = solve_inner(&w, &ch, &p, &InnerOptions::default()).unwrap();
            let g = |m1: f64, m2: f64| {
                let mut d = DualPoint { mu: vec![m1, m2], nu: 0.0 };
                d.nu = (-min_eigpair(&build_f(&d, &ch, p.alpha1, p.eta)).0).max(0.0);
                dual_value(&d, &w, &ch, &p).unwrap()
            };
            let hi = 4.0 * sol.dual.mu.iter().cloned().fold(1.0, f64::max);
            let (mut c1, mut c2, mut span) = (hi / 2.0, hi / 2.0, hi / 2.0);
            let mut best = f64::NEG_INFINITY;
            for _ in 0..40 {
                let (mut b1, mut b2) = (c1, c2);
                for i in 0..=40 {
                    for j in 0..=40 {
                        let m1 = (c1 - span + 2.0 * span * f64::from(i) / 40.0).max(0.0);
                        let m2 = (c2 - span + 2.0 * span * f64::from(j) / 40.0).max(0.0);
                        let v = g(m1, m2);
                        if v > best {
                            best = v;
                            b1 = m1;
                            b2 = m2;
                        }
                    }
                }
                c1 = b1;
                c2 = b2;
                span *= 0.5;
            }
            assert!(
                (sol.dual_value - best).abs() <= 1e-3 * best.abs().max(1e-12),
                "ellipsoid {} grid {}",
                sol.dual_value,
                best
            );
            assert!(sol.dual_value >= best - 1e-9 * best.abs());
        }
    }

    #[test]
    fn zero_beamformer_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (ch, _) = random_instance(&mut rng, 2, 2);
        let w = ComplexVector::zeros(2);
        assert!(solve_inner(&w, &ch, &unit_params(2, 2), &InnerOptions::default()).is_err());
    }
}
