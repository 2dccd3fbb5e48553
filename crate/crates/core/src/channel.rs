//! System parameters, path loss, Rician channel generation and harvested power.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ComplexVector, HermitianMatrix};

/// `P_W = 10^((P_dBm - 30) / 10)`
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Scalar configuration of one wireless powered AirComp system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Antennas at the access point (M).
    pub antennas: usize,
    /// Number of devices (K).
    pub devices: usize,
    /// Transmit power budget in watts.
    pub power_w: f64,
    /// Receiver noise variance in watts.
    pub noise_w: f64,
    /// Energy harvesting efficiency, in (0, 1]. The lossless value 1 is
    /// accepted for closed-form checks.
    pub eta: f64,
    /// Fraction of the block used for energy transfer.
    pub alpha1: f64,
    /// Fraction of the block used for the uplink computation.
    pub alpha2: f64,
}

pub const DEFAULT_ETA: f64 = 0.8;
pub const DEFAULT_ALPHA1: f64 = 0.5;

impl SystemParams {
    /// Builds parameters with `alpha2 = 1 - alpha1`.
    pub fn new(
        antennas: usize,
        devices: usize,
        power_w: f64,
        noise_w: f64,
        eta: f64,
        alpha1: f64,
    ) -> Result<Self> {
        let p = Self {
            antennas,
            devices,
            power_w,
            noise_w,
            eta,
            alpha1,
            alpha2: 1.0 - alpha1,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.antennas == 0 || self.devices == 0 {
            return bad(format!(
                "antennas ({}) and devices ({}) must be positive",
                self.antennas, self.devices
            ));
        }
        if !(self.power_w > 0.0 && self.power_w.is_finite()) {
            return bad(format!("power budget must be positive, got {}", self.power_w));
        }
        if !(self.noise_w > 0.0 && self.noise_w.is_finite()) {
            return bad(format!("noise variance must be positive, got {}", self.noise_w));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        let in_unit = |a: f64| a > 0.0 && a < 1.0;
        if !in_unit(self.alpha1) || !in_unit(self.alpha2) {
            return bad("slot fractions must lie in (0, 1)".into());
        }
        if (self.alpha1 + self.alpha2 - 1.0).abs() > 1e-12 {
            return bad(format!(
                "alpha1 + alpha2 must equal 1, got {}",
                self.alpha1 + self.alpha2
            ));
        }
        Ok(())
    }

    /// Per-device energy scaling `alpha1 * eta`.
    pub fn harvest_gain(&self) -> f64 {
        self.alpha1 * self.eta
    }
}

/// `L(d) = K0 (d / d0)^(-alpha0)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathLossModel {
    pub k0: f64,
    pub d0_m: f64,
    pub alpha0: f64,
}

impl Default for PathLossModel {
    /// -30 dB at 1 m with exponent 3.
    fn default() -> Self {
        Self {
            k0: db_to_linear(-30.0),
            d0_m: 1.0,
            alpha0: 3.0,
        }
    }
}

impl PathLossModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.k0 > 0.0 && self.d0_m > 0.0 && self.alpha0 >= 2.0) {
            return Err(Error::InvalidParameter(format!(
                "path loss model needs k0 > 0, d0 > 0, alpha0 >= 2: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn path_loss(model: &PathLossModel, distance_m: f64) -> Result<f64> {
    model.validate()?;
    if !(distance_m > 0.0 && distance_m.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "distance must be positive, got {distance_m}"
        )));
    }
    Ok(model.k0 * (distance_m / model.d0_m).powf(-model.alpha0))
}

/// One realization of the K device channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub h: Vec<ComplexVector>,
    pub distances_m: Vec<f64>,
    pub rician_kappa: f64,
}

impl ChannelSet {
    /// Wraps explicit channel vectors. Every vector must be finite, nonzero and
    /// of a common length.
    pub fn from_vectors(h: Vec<ComplexVector>, distances_m: Vec<f64>, rician_kappa: f64) -> Result<Self> {
        if h.is_empty() {
            return Err(Error::InvalidParameter("channel set is empty".into()));
        }
        if distances_m.len() != h.len() {
            return Err(Error::Shape(format!(
                "{} channels but {} distances",
                h.len(),
                distances_m.len()
            )));
        }
        let m = h[0].len();
        for (k, hk) in h.iter().enumerate() {
            if hk.len() != m || m == 0 {
                return Err(Error::Shape(format!("channel {k} has length {}", hk.len())));
            }
            crate::numerics::ensure_finite(hk, "channel vector")?;
            if hk.norm() == 0.0 {
                return Err(Error::InvalidParameter(format!("channel {k} is zero")));
            }
        }
        Ok(Self {
            h,
            distances_m,
            rician_kappa,
        })
    }

    /// Unit distances and no fading metadata, for hand-built instances.
    pub fn from_vectors_unit(h: Vec<ComplexVector>) -> Result<Self> {
        let n = h.len();
        Self::from_vectors(h, vec![1.0; n], 0.0)
    }

    pub fn antennas(&self) -> usize {
        self.h[0].len()
    }

    pub fn devices(&self) -> usize {
        self.h.len()
    }

    /// `|w^H h_k|` for every device.
    pub fn effective_gains(&self, w: &ComplexVector) -> Vec<f64> {
        self.h.iter().map(|hk| w.dotc(hk).norm()).collect()
    }

    pub fn check_matches(&self, params: &SystemParams) -> Result<()> {
        if self.antennas() != params.antennas || self.devices() != params.devices {
            return Err(Error::Shape(format!(
                "channels are {}x{} (M x K), params say {}x{}",
                self.antennas(),
                self.devices(),
                params.antennas,
                params.devices
            )));
        }
        Ok(())
    }
}

/// Draws `h_k = sqrt(L(d_k)) (sqrt(kappa/(kappa+1)) 1 + sqrt(1/(kappa+1)) g_k)`
/// with `g_k ~ CN(0, I)`. The line-of-sight component is the all-ones vector.
/// `kappa = +inf` gives the deterministic line-of-sight channel.
///
/// The generator is ChaCha20 seeded through `seed_from_u64(seed)`; devices
/// consume the stream in index order, antenna by antenna, real part first.
pub fn sample_channels(
    params: &SystemParams,
    model: &PathLossModel,
    distances_m: &[f64],
    kappa: f64,
    seed: u64,
) -> Result<ChannelSet> {
    if distances_m.len() != params.devices {
        return Err(Error::Shape(format!(
            "{} distances for {} devices",
            distances_m.len(),
            params.devices
        )));
    }
    if !(kappa >= 0.0) {
        return Err(Error::InvalidParameter(format!("Rician factor must be >= 0, got {kappa}")));
    }
    let (los, nlos) = if kappa.is_infinite() {
        (1.0, 0.0)
    } else {
        ((kappa / (kappa + 1.0)).sqrt(), (1.0 / (kappa + 1.0)).sqrt())
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let mut h = Vec::with_capacity(params.devices);
    for &d in distances_m {
        let gain = path_loss(model, d)?.sqrt();
        let v = ComplexVector::from_fn(params.antennas, |_, _| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            let g = Complex64::new(re * half, im * half);
            (Complex64::new(los, 0.0) + g * nlos) * gain
        });
        h.push(v);
    }
    ChannelSet::from_vectors(h, distances_m.to_vec(), kappa)
}

/// `eta * h^H S h`
pub fn harvested_power(s: &HermitianMatrix, h: &ComplexVector, eta: f64) -> Result<f64> {
    let q = s.quad_form(h);
    let scale = s.max_abs() * h.norm_squared();
    if q.im.abs() > 1e-9 * (q.re.abs() + scale) {
        return Err(Error::NonRealQuadraticForm(q.im / q.re.abs().max(f64::MIN_POSITIVE)));
    }
    Ok(eta * q.re.max(0.0))
}
