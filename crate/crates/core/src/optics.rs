//! Optical elements between crystal and detectors: loss elements,
//! polarizers, the polarizing beam splitter, the fiber delay line, and the
//! triggered Pockels cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::source::{PairEvent, Polarization};
use crate::timebase::{Duration, RandomStream, TimeStamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Signal,
    Idler,
}

/// Carrier for per-branch photon state. `pair_id` is diagnostic lineage and
/// is never visible to estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Photon {
    pub t_arrive: TimeStamp,
    pub pol: Polarization,
    pub branch: Branch,
    pub pair_id: u64,
}

/// Extracts the photons of one branch from the pair events, sorted by
/// arrival time. Idler photons outside the collection channel are dropped.
pub fn branch_photons(pairs: &[PairEvent], branch: Branch) -> Vec<Photon> {
    let mut photons: Vec<Photon> = pairs
        .iter()
        .filter(|p| match branch {
            Branch::Signal => p.signal_in_channel,
            Branch::Idler => p.idler_in_channel,
        })
        .map(|p| Photon {
            t_arrive: match branch {
                Branch::Signal => p.t_signal,
                Branch::Idler => p.t_idler,
            },
            pol: match branch {
                Branch::Signal => p.signal_pol,
                Branch::Idler => p.idler_pol,
            },
            branch,
            pair_id: p.pair_id,
        })
        .collect();
    photons.sort_by_key(|p| p.t_arrive);
    photons
}

/// A neutral loss element (filter, coupling, crystal transmittance).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossElement {
    pub transmittance: f64,
}

impl LossElement {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.transmittance) {
            return Err(Error::invalid(format!(
                "transmittance must be in [0, 1], got {}",
                self.transmittance
            )));
        }
        Ok(())
    }
}

/// Bernoulli thinning: each photon survives independently with probability
/// `transmittance`; order is preserved.
pub fn apply_loss(
    photons: &[Photon],
    elem: &LossElement,
    stream: &RandomStream,
) -> Result<Vec<Photon>> {
    elem.validate()?;
    if elem.transmittance >= 1.0 {
        return Ok(photons.to_vec());
    }
    let mut rng = stream.rng();
    Ok(photons
        .iter()
        .filter(|_| rng.random_bool(elem.transmittance))
        .copied()
        .collect())
}

/// Linear polarizer. `angle_deg` is measured from horizontal; 0 degrees
/// transmits H. `extinction` is the residual transmission of the crossed
/// polarization (0 for an ideal Glan-Thompson prism).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarizerSpec {
    pub angle_deg: f64,
    #[serde(default)]
    pub extinction: f64,
}

impl PolarizerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.extinction) {
            return Err(Error::invalid(format!(
                "extinction must be in [0, 1), got {}",
                self.extinction
            )));
        }
        Ok(())
    }

    /// Single-photon Malus law: transmission probability for `pol`.
    pub fn pass_probability(&self, pol: Polarization) -> f64 {
        let theta = self.angle_deg.to_radians();
        let (c2, s2) = (theta.cos().powi(2), theta.sin().powi(2));
        match pol {
            Polarization::H => c2 + self.extinction * s2,
            Polarization::V => s2 + self.extinction * c2,
        }
    }
}

/// Bernoulli trial of the Malus law for one photon.
pub fn polarizer_pass(photon: &Photon, spec: &PolarizerSpec, rng: &mut impl Rng) -> bool {
    let p = spec.pass_probability(photon.pol);
    if p >= 1.0 {
        true
    } else if p <= 0.0 {
        false
    } else {
        rng.random_bool(p)
    }
}

/// Applies the polarizer to a stream, keeping the transmitted photons.
pub fn polarizer_apply(
    photons: &[Photon],
    spec: &PolarizerSpec,
    stream: &RandomStream,
) -> Result<Vec<Photon>> {
    spec.validate()?;
    let mut rng = stream.rng();
    Ok(photons
        .iter()
        .filter(|ph| polarizer_pass(ph, spec, &mut rng))
        .copied()
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PbsPort {
    /// Vertical polarization is transmitted.
    Transmit,
    /// Horizontal polarization is reflected.
    Reflect,
}

/// Deterministic routing of a polarizing beam splitter: V to the transmit
/// port, H to the reflect port.
pub fn pbs_route(photon: &Photon) -> PbsPort {
    match photon.pol {
        Polarization::V => PbsPort::Transmit,
        Polarization::H => PbsPort::Reflect,
    }
}

/// Keeps the photons leaving through `port`.
pub fn pbs_select(photons: &[Photon], port: PbsPort) -> Vec<Photon> {
    photons
        .iter()
        .filter(|ph| pbs_route(ph) == port)
        .copied()
        .collect()
}

/// Single-mode polarization-maintaining fiber: a fixed delay plus coupling
/// loss. 50 m of fiber is roughly 250 ns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberSpec {
    pub delay_ps: Duration,
    pub transmittance: f64,
}

impl FiberSpec {
    pub fn validate(&self) -> Result<()> {
        if self.delay_ps.is_negative() {
            return Err(Error::invalid("fiber delay must be >= 0"));
        }
        LossElement {
            transmittance: self.transmittance,
        }
        .validate()
    }
}

/// Shifts every timestamp by the fiber delay and thins by its
/// transmittance. Polarization is preserved (polarization-maintaining).
pub fn fiber_delay(
    photons: &[Photon],
    spec: &FiberSpec,
    stream: &RandomStream,
) -> Result<Vec<Photon>> {
    spec.validate()?;
    let survivors = apply_loss(
        photons,
        &LossElement {
            transmittance: spec.transmittance,
        },
        stream,
    )?;
    Ok(survivors
        .into_iter()
        .map(|mut ph| {
            ph.t_arrive = ph.t_arrive + spec.delay_ps;
            ph
        })
        .collect())
}

/// Triggered Pockels cell driven as a conditional half-wave plate.
///
/// An accepted trigger at `t` opens, after `trigger_delay`, a high-voltage
/// pulse with a `rise` ramp, a `flat_top` plateau (full rotation with
/// probability `flip_efficiency`), and a long `fall_tail` (partial-wave
/// regime, `flip_efficiency / 2`, like the rise). Triggers closer than
/// `driver_dead_time` to the previous accepted trigger are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PockelsSpec {
    pub trigger_delay_ps: Duration,
    #[serde(default = "default_rise")]
    pub rise_ps: Duration,
    #[serde(default = "default_flat_top")]
    pub flat_top_ps: Duration,
    #[serde(default = "default_fall_tail")]
    pub fall_tail_ps: Duration,
    pub flip_efficiency: f64,
    #[serde(default = "default_driver_dead_time")]
    pub driver_dead_time_ps: Duration,
    #[serde(default = "default_max_trigger_rate")]
    pub max_trigger_rate: f64,
}

fn default_rise() -> Duration {
    Duration::from_ns(5)
}
fn default_flat_top() -> Duration {
    Duration::from_ns(180)
}
fn default_fall_tail() -> Duration {
    Duration::from_us(10)
}
fn default_driver_dead_time() -> Duration {
    Duration::from_us(10)
}
fn default_max_trigger_rate() -> f64 {
    1e4
}

impl PockelsSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, d) in [
            ("trigger_delay_ps", self.trigger_delay_ps),
            ("rise_ps", self.rise_ps),
            ("flat_top_ps", self.flat_top_ps),
            ("fall_tail_ps", self.fall_tail_ps),
            ("driver_dead_time_ps", self.driver_dead_time_ps),
        ] {
            if d.is_negative() {
                return Err(Error::invalid(format!("{name} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_efficiency) {
            return Err(Error::invalid(format!(
                "flip_efficiency must be in [0, 1], got {}",
                self.flip_efficiency
            )));
        }
        if !(self.max_trigger_rate > 0.0) {
            return Err(Error::invalid("max_trigger_rate must be > 0"));
        }
        Ok(())
    }

    /// Total span of the voltage pulse after the trigger instant.
    fn pulse_span(&self) -> Duration {
        self.trigger_delay_ps + self.rise_ps + self.flat_top_ps + self.fall_tail_ps
    }
}

/// Applies the driver dead time: a trigger is accepted iff it arrives at
/// least `driver_dead_time` after the previous accepted trigger.
pub fn accept_triggers(triggers: &[TimeStamp], driver_dead_time: Duration) -> Vec<TimeStamp> {
    let mut accepted = Vec::with_capacity(triggers.len());
    let mut last: Option<TimeStamp> = None;
    for &t in triggers {
        match last {
            Some(prev) if (t - prev) < driver_dead_time => {}
            _ => {
                accepted.push(t);
                last = Some(t);
            }
        }
    }
    accepted
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PulseRegion {
    None,
    Ramp,
    FlatTop,
}

fn classify(spec: &PockelsSpec, accepted: &[TimeStamp], t: TimeStamp) -> PulseRegion {
    // Only triggers within the pulse span before `t` can matter.
    let span = spec.pulse_span();
    let first = accepted.partition_point(|&trig| trig + span < t);
    let mut region = PulseRegion::None;
    for &trig in &accepted[first..] {
        let start = trig + spec.trigger_delay_ps;
        if start > t {
            break;
        }
        let rise_end = start + spec.rise_ps;
        let flat_end = rise_end + spec.flat_top_ps;
        let tail_end = flat_end + spec.fall_tail_ps;
        if t >= rise_end && t <= flat_end {
            return PulseRegion::FlatTop;
        }
        if (t >= start && t < rise_end) || (t > flat_end && t <= tail_end) {
            region = PulseRegion::Ramp;
        }
    }
    region
}

/// Conditionally rotates idler polarizations.
///
/// Timestamps are never changed, only polarization. Both input lists must
/// be sorted.
pub fn pockels_apply(
    idler_photons: &[Photon],
    trigger_clicks: &[TimeStamp],
    spec: &PockelsSpec,
    stream: &RandomStream,
) -> Result<Vec<Photon>> {
    spec.validate()?;
    if idler_photons.windows(2).any(|w| w[1].t_arrive < w[0].t_arrive) {
        return Err(Error::invalid("idler photons not sorted"));
    }
    if trigger_clicks.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("trigger clicks not sorted"));
    }
    let accepted = accept_triggers(trigger_clicks, spec.driver_dead_time_ps);
    let mut rng = stream.rng();
    let out = idler_photons
        .iter()
        .map(|orig| {
            let mut ph = *orig;
            let p_flip = match classify(spec, &accepted, ph.t_arrive) {
                PulseRegion::FlatTop => spec.flip_efficiency,
                PulseRegion::Ramp => spec.flip_efficiency / 2.0,
                PulseRegion::None => 0.0,
            };
            if p_flip > 0.0 && (p_flip >= 1.0 || rng.random_bool(p_flip)) {
                ph.pol = ph.pol.flipped();
            }
            ph
        })
        .collect();
    Ok(out)
}
