//! SPDC pair-event generation for Type I and Type II phase matching, with
//! the wavelength and polarization correlations of the twin photons.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timebase::{poisson_stream, Duration, RandomStream, TimeStamp};

/// Relative tolerance on 1/lambda_p = 1/lambda_s + 1/lambda_i. The nominal
/// laboratory wavelengths are rounded to the nanometer, which leaves
/// residuals of a few 1e-4, so the check passes below 1e-3.
pub const ENERGY_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarization {
    H,
    V,
}

impl Polarization {
    pub fn flipped(self) -> Polarization {
        match self {
            Polarization::H => Polarization::V,
            Polarization::V => Polarization::H,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseMatching {
    /// Down-converted photons carry parallel polarization (ordinary waves).
    #[serde(rename = "type_i")]
    TypeI,
    /// Down-converted photons carry orthogonal polarization.
    #[serde(rename = "type_ii")]
    TypeII,
}

/// Source configuration. Also a section of the scenario config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// Pair decays per second at the crystal.
    pub pair_rate: f64,
    pub pump_wavelength_nm: f64,
    pub signal_wavelength_nm: f64,
    pub idler_wavelength_nm: f64,
    pub phase_matching: PhaseMatching,
    /// Spread of the per-branch co-emission times around the decay time.
    /// The physical spread is tens of femtoseconds, below the 1 ps tick, so
    /// the default is 0; set a larger value to study timing systematics.
    #[serde(default)]
    pub emission_jitter_sigma_ps: Duration,
    /// Probability that the idler geometrically enters the idler collection
    /// channel given that the signal did. Abstracts the correlation cones.
    pub collection_overlap: f64,
}

/// One SPDC decay. `t_signal` / `t_idler` are the per-branch emission times,
/// `t_emit` plus independent Gaussian co-emission jitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairEvent {
    pub pair_id: u64,
    pub t_emit: TimeStamp,
    pub t_signal: TimeStamp,
    pub t_idler: TimeStamp,
    pub signal_pol: Polarization,
    pub idler_pol: Polarization,
    /// Always true: the signal branch defines the collected direction.
    pub signal_in_channel: bool,
    /// Bernoulli(collection_overlap).
    pub idler_in_channel: bool,
}

/// Result of the energy-conservation check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyCheck {
    /// Dimensionless residual |1/l_p - 1/l_s - 1/l_i| * l_p.
    pub residual: f64,
    pub pass: bool,
}

/// Checks 1/lambda_pump = 1/lambda_signal + 1/lambda_idler.
pub fn validate_energy_conservation(spec: &SourceSpec) -> Result<EnergyCheck> {
    let (p, s, i) = (
        spec.pump_wavelength_nm,
        spec.signal_wavelength_nm,
        spec.idler_wavelength_nm,
    );
    for (name, w) in [("pump", p), ("signal", s), ("idler", i)] {
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::invalid(format!(
                "{name} wavelength must be positive, got {w}"
            )));
        }
    }
    let residual = ((1.0 / p) - (1.0 / s) - (1.0 / i)).abs() * p;
    Ok(EnergyCheck {
        residual,
        pass: residual <= ENERGY_TOLERANCE,
    })
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.pair_rate >= 0.0) || !self.pair_rate.is_finite() {
            return Err(Error::invalid(format!(
                "pair_rate must be >= 0, got {}",
                self.pair_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.collection_overlap) {
            return Err(Error::invalid(format!(
                "collection_overlap must be in [0, 1], got {}",
                self.collection_overlap
            )));
        }
        if self.emission_jitter_sigma_ps.is_negative() {
            return Err(Error::invalid("emission_jitter_sigma_ps must be >= 0"));
        }
        let check = validate_energy_conservation(self)?;
        if !check.pass {
            return Err(Error::invalid(format!(
                "wavelengths violate energy conservation: residual {:.3e} > {:.0e}",
                check.residual, ENERGY_TOLERANCE
            )));
        }
        Ok(())
    }
}

/// Generates the pair decays over `[0, gate)`.
///
/// Decay times are Poisson(pair_rate * gate). Type I pairs carry identical
/// polarization (H as ordinary waves); Type II pairs take (H, V) or (V, H)
/// with probability 1/2 each, independently per pair -- the uncompensated
/// state behaves as a classical anticorrelated mixture.
pub fn generate_pairs(
    spec: &SourceSpec,
    gate: Duration,
    stream: &RandomStream,
) -> Result<Vec<PairEvent>> {
    spec.validate()?;
    let decays = poisson_stream(spec.pair_rate, gate, &stream.substream(0))?;
    let mut rng = stream.substream(1).rng();
    let sigma = spec.emission_jitter_sigma_ps.as_ps() as f64;
    let jitter = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let mut pairs = Vec::with_capacity(decays.len());
    for (id, t_emit) in decays.into_iter().enumerate() {
        let (signal_pol, idler_pol) = match spec.phase_matching {
            PhaseMatching::TypeI => (Polarization::H, Polarization::H),
            PhaseMatching::TypeII => {
                if rng.random_bool(0.5) {
                    (Polarization::H, Polarization::V)
                } else {
                    (Polarization::V, Polarization::H)
                }
            }
        };
        let idler_in_channel = if spec.collection_overlap >= 1.0 {
            true
        } else {
            rng.random_bool(spec.collection_overlap)
        };
        let (dt_s, dt_i) = match &jitter {
            Some(n) => (
                n.sample(&mut rng).round() as i64,
                n.sample(&mut rng).round() as i64,
            ),
            None => (0, 0),
        };
        pairs.push(PairEvent {
            pair_id: id as u64,
            t_emit,
            t_signal: TimeStamp(t_emit.0 + dt_s),
            t_idler: TimeStamp(t_emit.0 + dt_i),
            signal_pol,
            idler_pol,
            signal_in_channel: true,
            idler_in_channel,
        });
    }
    Ok(pairs)
}
