//! Comparison schemes: isotropic charging with optimized power control and
//! receiver, and time-division charging with uniform-forcing channel
//! inversion.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelSet, SystemParams};
use crate::error::{Error, Result};
use crate::joint::{
    align_all, alternate, compute_mse, in_channel_span, optimal_amplitudes, solve_joint_from, BeamformingSolution,
    JointOptions, SolverReport, Step,
};
use crate::numerics::{hermitian_eig, normalize, ComplexVector, HermitianMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Proposed,
    Isotropic,
    TimeDivision,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Proposed, Scheme::Isotropic, Scheme::TimeDivision];

    pub fn id(self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::Isotropic => "isotropic",
            Scheme::TimeDivision => "time_division",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.id() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?} (expected proposed, isotropic or time_division)")))
    }
}

#[derive(Debug, Clone)]
pub struct SchemeResult {
    pub scheme: Scheme,
    pub solution: BeamformingSolution,
    pub mse: f64,
    /// Energy available to each device for its uplink transmission.
    pub harvested: Vec<f64>,
    pub report: Option<SolverReport>,
}

impl SchemeResult {
    /// Largest relative excess of `alpha2 |b_k|^2` over the harvested energy.
    pub fn energy_violation(&self, params: &SystemParams) -> f64 {
        self.solution
            .b
            .iter()
            .zip(&self.harvested)
            .map(|(b, &e)| {
                let need = params.alpha2 * b.norm_sqr();
                if need <= e {
                    0.0
                } else if e > 0.0 {
                    need / e - 1.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }
}

fn covariance_energy(s: &HermitianMatrix, channels: &ChannelSet, params: &SystemParams) -> Vec<f64> {
    channels
        .h
        .iter()
        .map(|h| params.harvest_gain() * s.quad_form_re(h).max(0.0))
        .collect()
}

/// `S = (P/M) I` fixed; amplitudes (truncated channel inversion under the
/// energy caps of this `S`) and the MMSE receiver are alternated with the
/// same stopping rule as the joint design.
pub fn isotropic_scheme(params: &SystemParams, channels: &ChannelSet, opts: &JointOptions) -> Result<SchemeResult> {
    let start = crate::joint::initial_point(params, channels)?;
    let fixed = start.s.clone();
    let (mut sol, report) = in_channel_span(params, channels, start, |p, ch, start| {
        alternate(p, ch, start, opts, |sol, _| {
            let b_tilde = optimal_amplitudes(&sol.s, &sol.w, ch, p);
            Ok(Step {
                solution: BeamformingSolution {
                    b: align_all(&sol.w, ch, &b_tilde),
                    s: sol.s.clone(),
                    w: sol.w.clone(),
                    b_tilde,
                },
                report: None,
                dual: None,
            })
        })
    })?;
    // The span coordinates keep every h_k^H S h_k; restore the full isotropic S.
    sol.s = fixed;
    Ok(SchemeResult {
        scheme: Scheme::Isotropic,
        mse: sol.mse(channels, params.noise_w),
        harvested: covariance_energy(&sol.s, channels, params),
        solution: sol,
        report: Some(report),
    })
}

/// Joint design started from `start` (typically the isotropic solution, so
/// the result can only improve on it).
pub fn proposed_scheme(
    params: &SystemParams,
    channels: &ChannelSet,
    start: BeamformingSolution,
    opts: &JointOptions,
) -> Result<SchemeResult> {
    let (sol, report) = solve_joint_from(params, channels, start, opts)?;
    Ok(SchemeResult {
        scheme: Scheme::Proposed,
        mse: sol.mse(channels, params.noise_w),
        harvested: covariance_energy(&sol.s, channels, params),
        solution: sol,
        report: Some(report),
    })
}

/// Which subslots a device harvests in under time-division charging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Harvesting {
    /// Only the subslot whose beam points at the device.
    #[default]
    OwnSlot,
    /// Every subslot, including beams aimed at other devices.
    AllSlots,
}

/// Aggregation direction of the uniform-forcing receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    ChannelSum,
    /// Dominant eigenvector of `sum_k h_k h_k^H`.
    DominantEigenvector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TimeDivisionOptions {
    #[serde(default)]
    pub harvesting: Harvesting,
    #[serde(default)]
    pub direction: Direction,
}

/// Charges one device at a time with maximum-ratio transmission over equal
/// subslots of `alpha1`, then aligns every device to the same effective gain
/// (uniform forcing). The reported `S` is the time-averaged covariance.
pub fn time_division_scheme(
    params: &SystemParams,
    channels: &ChannelSet,
    opts: &TimeDivisionOptions,
) -> Result<SchemeResult> {
    params.validate()?;
    channels.check_matches(params)?;
    let m = channels.antennas();
    let k = channels.devices();
    let beams: Vec<ComplexVector> = channels.h.iter().map(normalize).collect();
    let slot = params.alpha1 / k as f64;
    let harvested: Vec<f64> = channels
        .h
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let gain = |beam: &ComplexVector| beam.dotc(h).norm_sqr();
            let total = match opts.harvesting {
                Harvesting::OwnSlot => gain(&beams[i]),
                Harvesting::AllSlots => beams.iter().map(gain).sum(),
            };
            slot * params.eta * params.power_w * total
        })
        .collect();

    let direction = match opts.direction {
        Direction::ChannelSum => {
            let sum = channels.h.iter().fold(ComplexVector::zeros(m), |acc, h| acc + h);
            if sum.norm() == 0.0 {
                return Err(Error::SchemeUndefined("channel sum is zero".into()));
            }
            normalize(&sum)
        }
        Direction::DominantEigenvector => {
            let mut gram = HermitianMatrix::zeros(m);
            for h in &channels.h {
                gram.add_outer(h, 1.0);
            }
            hermitian_eig(&gram).vector(m - 1)
        }
    };
    let g: Vec<Complex64> = channels.h.iter().map(|h| direction.dotc(h)).collect();
    if let Some(i) = g.iter().position(|x| x.norm() == 0.0) {
        return Err(Error::SchemeUndefined(format!("device {i} is orthogonal to the aggregation direction")));
    }
    let c = g
        .iter()
        .zip(&harvested)
        .map(|(gk, e)| gk.norm() * (e / params.alpha2).sqrt())
        .fold(f64::INFINITY, f64::min);
    if !(c > 0.0) {
        return Err(Error::SchemeUndefined("no device can transmit".into()));
    }
    let b: Vec<Complex64> = g.iter().map(|gk| gk.conj() * (c / gk.norm_sqr())).collect();
    let w = direction.map(|x| x / c);
    let mut s = HermitianMatrix::zeros(m);
    for beam in &beams {
        s.add_outer(beam, params.power_w / k as f64);
    }
    let b_tilde = b.iter().map(|x| x.norm()).collect();
    let mse = compute_mse(&w, &b, channels, params.noise_w);
    Ok(SchemeResult {
        scheme: Scheme::TimeDivision,
        solution: BeamformingSolution { s, w, b, b_tilde },
        mse,
        harvested,
        report: None,
    })
}
