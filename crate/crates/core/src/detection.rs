//! Photon-counting detectors and analog photocurrent traces.
//!
//! Click records carry a diagnostic origin tag (photon lineage vs dark
//! count) that exists for validation only; estimators receive the stripped
//! timestamp view produced by [`strip`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::Photon;
use crate::timebase::{poisson_stream, Duration, RandomStream, TimeStamp};

/// Single-photon detector parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    /// Quantum efficiency of the detection apparatus.
    pub eta: f64,
    /// Dark counts per second.
    #[serde(default)]
    pub dark_rate: f64,
    /// Non-paralyzable dead time after each registered click.
    #[serde(default)]
    pub dead_time_ps: Duration,
    /// Gaussian timing jitter applied to every raw click.
    #[serde(default = "default_jitter")]
    pub jitter_sigma_ps: Duration,
}

fn default_jitter() -> Duration {
    // Typical SPAD timing spread; config value, not a measured one.
    Duration::from_ps(300)
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        if !(self.dark_rate >= 0.0) {
            return Err(Error::invalid("dark_rate must be >= 0"));
        }
        if self.dead_time_ps.is_negative() {
            return Err(Error::invalid("dead_time_ps must be >= 0"));
        }
        if self.jitter_sigma_ps.is_negative() {
            return Err(Error::invalid("jitter_sigma_ps must be >= 0"));
        }
        Ok(())
    }
}

/// Diagnostic click origin. Never read by estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Photon { pair_id: u64 },
    Dark,
}

/// Index of a detector within a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DetectorId(pub u32);

/// A timestamped detector firing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClickRecord {
    pub t: TimeStamp,
    pub detector_id: DetectorId,
    pub origin: Origin,
}

/// The estimator-facing view: timestamps only.
pub fn strip(clicks: &[ClickRecord]) -> Vec<TimeStamp> {
    clicks.iter().map(|c| c.t).collect()
}

/// Converts photon arrivals into detector clicks.
///
/// Each photon fires with probability `eta`; dark clicks at `dark_rate` are
/// merged in; every raw click gets Gaussian timing jitter; the
/// non-paralyzable dead-time filter then discards any click within
/// `dead_time` of the previous surviving click. Clicks leaving `[0, gate)`
/// are dropped (the counter only runs during the gate).
pub fn detect(
    photons: &[Photon],
    spec: &DetectorSpec,
    gate: Duration,
    stream: &RandomStream,
    detector_id: DetectorId,
) -> Result<Vec<ClickRecord>> {
    spec.validate()?;
    if photons.windows(2).any(|w| w[1].t_arrive < w[0].t_arrive) {
        return Err(Error::invalid("photons not sorted"));
    }
    let mut rng = stream.substream(0).rng();

    // Efficiency thinning.
    let mut raw: Vec<(TimeStamp, Origin)> = Vec::with_capacity(photons.len());
    for ph in photons {
        if spec.eta >= 1.0 || (spec.eta > 0.0 && rng.random_bool(spec.eta)) {
            raw.push((ph.t_arrive, Origin::Photon { pair_id: ph.pair_id }));
        }
    }

    // Dark counts over the same gate.
    for t in poisson_stream(spec.dark_rate, gate, &stream.substream(1))? {
        raw.push((t, Origin::Dark));
    }
    raw.sort_by_key(|(t, _)| *t);

    // Timing jitter, applied in arrival order.
    if spec.jitter_sigma_ps.as_ps() > 0 {
        let normal = Normal::new(0.0, spec.jitter_sigma_ps.as_ps() as f64)
            .map_err(|e| Error::invalid(e.to_string()))?;
        for (t, _) in raw.iter_mut() {
            *t = TimeStamp(t.0 + normal.sample(&mut rng).round() as i64);
        }
        raw.sort_by_key(|(t, _)| *t);
    }

    // Non-paralyzable dead time; also enforces strictly increasing clicks.
    let dead = spec.dead_time_ps;
    let mut clicks: Vec<ClickRecord> = Vec::with_capacity(raw.len());
    let mut last: Option<TimeStamp> = None;
    for (mut t, origin) in raw {
        if let Some(prev) = last {
            if dead.as_ps() > 0 {
                if t - prev < dead {
                    continue;
                }
            } else if t <= prev {
                // Zero dead time: the ps grid may collide; keep output
                // strictly increasing.
                t = TimeStamp(prev.0 + 1);
            }
        }
        if t.0 < 0 || t.0 >= gate.as_ps() {
            continue;
        }
        clicks.push(ClickRecord {
            t,
            detector_id,
            origin,
        });
        last = Some(t);
    }
    Ok(clicks)
}

/// Analog detection chain parameters: every registered detection deposits a
/// pulse of random charge into its time bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalogSpec {
    /// Mean charge per detection, arbitrary units.
    pub gain_mean: f64,
    /// Relative standard deviation of the gain fluctuation.
    #[serde(default)]
    pub gain_rel_std: f64,
    pub bin_width_ps: Duration,
}

impl AnalogSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain_mean > 0.0) {
            return Err(Error::invalid("gain_mean must be > 0"));
        }
        if !(self.gain_rel_std >= 0.0) {
            return Err(Error::invalid("gain_rel_std must be >= 0"));
        }
        if self.bin_width_ps.as_ps() <= 0 {
            return Err(Error::invalid("bin_width_ps must be > 0"));
        }
        Ok(())
    }
}

/// Integrates the photocurrent of an analog detector into fixed bins.
///
/// Each detected photon (Bernoulli `eta`) and each dark count deposits an
/// independent gain sample `max(0, Normal(gain_mean, gain_rel_std *
/// gain_mean))` into its bin. A trailing partial bin is dropped.
pub fn analog_trace(
    photons: &[Photon],
    det: &DetectorSpec,
    aspec: &AnalogSpec,
    gate: Duration,
    stream: &RandomStream,
) -> Result<Vec<f64>> {
    det.validate()?;
    aspec.validate()?;
    let n_bins = (gate.as_ps() / aspec.bin_width_ps.as_ps()) as usize;
    let mut bins = vec![0.0_f64; n_bins];
    let sigma = aspec.gain_rel_std * aspec.gain_mean;
    let normal = if sigma > 0.0 {
        Some(Normal::new(aspec.gain_mean, sigma).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let mut rng = stream.substream(0).rng();
    let deposit = |t: TimeStamp, rng: &mut rand_chacha::ChaCha12Rng, bins: &mut [f64]| {
        if t.0 < 0 {
            return;
        }
        let idx = (t.0 / aspec.bin_width_ps.as_ps()) as usize;
        if idx < bins.len() {
            let g = match &normal {
                Some(n) => n.sample(rng).max(0.0),
                None => aspec.gain_mean,
            };
            bins[idx] += g;
        }
    };
    for ph in photons {
        if det.eta >= 1.0 || (det.eta > 0.0 && rng.random_bool(det.eta)) {
            deposit(ph.t_arrive, &mut rng, &mut bins);
        }
    }
    for t in poisson_stream(det.dark_rate, gate, &stream.substream(1))? {
        deposit(t, &mut rng, &mut bins);
    }
    Ok(bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::Branch;
    use crate::source::Polarization;

    fn photons(n: usize, spacing_ps: i64) -> Vec<Photon> {
        (0..n)
            .map(|i| Photon {
                t_arrive: TimeStamp(i as i64 * spacing_ps + 5),
                pol: Polarization::H,
                branch: Branch::Signal,
                pair_id: i as u64,
            })
            .collect()
    }

    fn ideal() -> DetectorSpec {
        DetectorSpec {
            eta: 1.0,
            dark_rate: 0.0,
            dead_time_ps: Duration::ZERO,
            jitter_sigma_ps: Duration::ZERO,
        }
    }

    const D0: DetectorId = DetectorId(0);

    #[test]
    fn ideal_detector_reproduces_arrival_times() {
        let ph = photons(1000, 1_000_000);
        let clicks = detect(&ph, &ideal(), Duration::from_secs_f64(1.0), &RandomStream::new(1), D0)
            .unwrap();
        assert_eq!(clicks.len(), ph.len());
        for (c, p) in clicks.iter().zip(&ph) {
            assert_eq!(c.t, p.t_arrive);
            assert_eq!(c.origin, Origin::Photon { pair_id: p.pair_id });
        }
    }

    #[test]
    fn dark_counts_alone_poisson() {
        let mut spec = ideal();
        spec.dark_rate = 1e3;
        let clicks = detect(&[], &spec, Duration::from_secs_f64(1.0), &RandomStream::new(2), D0)
            .unwrap();
        let tol = 5.0 * 1e3_f64.sqrt();
        assert!((clicks.len() as f64 - 1e3).abs() < tol, "{}", clicks.len());
        assert!(clicks.iter().all(|c| c.origin == Origin::Dark));
    }

    #[test]
    fn dead_time_blocks_second_click() {
        let mut spec = ideal();
        spec.dead_time_ps = Duration::from_us(10);
        let ph = vec![
            Photon {
                t_arrive: TimeStamp(1_000),
                pol: Polarization::H,
                branch: Branch::Signal,
                pair_id: 0,
            },
            Photon {
                t_arrive: TimeStamp(2_000), // 1 ns later
                pol: Polarization::H,
                branch: Branch::Signal,
                pair_id: 1,
            },
        ];
        let clicks = detect(&ph, &spec, Duration::from_secs_f64(1.0), &RandomStream::new(3), D0)
            .unwrap();
        assert_eq!(clicks.len(), 1);
    }

    #[test]
    fn dead_time_invariant_min_spacing() {
        let mut spec = ideal();
        spec.dark_rate = 2e5;
        spec.dead_time_ps = Duration::from_ns(500);
        spec.jitter_sigma_ps = Duration::from_ps(300);
        let clicks = detect(&[], &spec, Duration::from_secs_f64(0.5), &RandomStream::new(4), D0)
            .unwrap();
        assert!(!clicks.is_empty());
        for w in clicks.windows(2) {
            assert!(w[1].t - w[0].t >= spec.dead_time_ps);
        }
    }

    #[test]
    fn efficiency_thinning_fraction() {
        let mut spec = ideal();
        spec.eta = 0.37;
        let ph = photons(100_000, 10_000);
        let clicks = detect(&ph, &spec, Duration::from_secs_f64(1.0), &RandomStream::new(5), D0)
            .unwrap();
        let n = ph.len() as f64;
        let tol = 5.0 * (n * 0.37 * 0.63).sqrt();
        assert!((clicks.len() as f64 - 0.37 * n).abs() < tol);
    }

    #[test]
    fn click_rate_saturates_at_inverse_dead_time() {
        // Input rate 100 / dead_time: output within 10% of 1 / dead_time.
        let mut spec = ideal();
        spec.dead_time_ps = Duration::from_us(1);
        let rate_in = 100.0 / spec.dead_time_ps.as_secs_f64();
        let gate = Duration::from_secs_f64(0.02);
        let arrivals = poisson_stream(rate_in, gate, &RandomStream::new(6)).unwrap();
        let ph: Vec<Photon> = arrivals
            .iter()
            .enumerate()
            .map(|(i, &t)| Photon {
                t_arrive: t,
                pol: Polarization::H,
                branch: Branch::Signal,
                pair_id: i as u64,
            })
            .collect();
        let clicks = detect(&ph, &spec, gate, &RandomStream::new(7), D0).unwrap();
        let out_rate = clicks.len() as f64 / gate.as_secs_f64();
        let saturation = 1.0 / spec.dead_time_ps.as_secs_f64();
        assert!(
            (out_rate - saturation).abs() / saturation < 0.10,
            "out_rate {out_rate} vs saturation {saturation}"
        );
    }

    #[test]
    fn unsorted_photons_rejected() {
        let mut ph = photons(3, 1_000);
        ph.swap(0, 2);
        assert!(
            detect(&ph, &ideal(), Duration::from_secs_f64(1.0), &RandomStream::new(8), D0)
                .is_err()
        );
    }

    #[test]
    fn analog_trace_empty_and_deterministic_gain() {
        let det = ideal();
        let aspec = AnalogSpec {
            gain_mean: 2.5,
            gain_rel_std: 0.0,
            bin_width_ps: Duration::from_us(1),
        };
        let gate = Duration::from_us(100);
        let bins = analog_trace(&[], &det, &aspec, gate, &RandomStream::new(9)).unwrap();
        assert_eq!(bins.len(), 100);
        assert!(bins.iter().all(|&b| b == 0.0));

        // One photon per bin, eta 1, deterministic gain: every bin = gain.
        let ph: Vec<Photon> = (0..100)
            .map(|i| Photon {
                t_arrive: TimeStamp(i * 1_000_000 + 500_000),
                pol: Polarization::H,
                branch: Branch::Signal,
                pair_id: i as u64,
            })
            .collect();
        let bins = analog_trace(&ph, &det, &aspec, gate, &RandomStream::new(10)).unwrap();
        assert!(bins.iter().all(|&b| (b - 2.5).abs() < 1e-12));
    }

    #[test]
    fn analog_trace_mean_bin_value() {
        // mean bin ~ eta * rate * bin_width * gain_mean over 1e5 bins.
        let mut det = ideal();
        det.eta = 0.4;
        let aspec = AnalogSpec {
            gain_mean: 1.5,
            gain_rel_std: 0.3,
            bin_width_ps: Duration::from_us(1),
        };
        let gate = Duration::from_secs_f64(0.1); // 1e5 bins
        let rate = 2e5;
        let arrivals = poisson_stream(rate, gate, &RandomStream::new(11)).unwrap();
        let ph: Vec<Photon> = arrivals
            .iter()
            .enumerate()
            .map(|(i, &t)| Photon {
                t_arrive: t,
                pol: Polarization::H,
                branch: Branch::Signal,
                pair_id: i as u64,
            })
            .collect();
        let bins = analog_trace(&ph, &det, &aspec, gate, &RandomStream::new(12)).unwrap();
        let mean = bins.iter().sum::<f64>() / bins.len() as f64;
        let expected = 0.4 * rate * aspec.bin_width_ps.as_secs_f64() * 1.5;
        // Compound-Poisson variance per bin: lambda * E[g^2].
        let lambda = 0.4 * rate * aspec.bin_width_ps.as_secs_f64();
        let sigma_bin = (lambda * (1.5_f64.powi(2) * (1.0 + 0.09))).sqrt();
        let tol = 5.0 * sigma_bin / (bins.len() as f64).sqrt();
        assert!((mean - expected).abs() < tol, "mean {mean} vs {expected}");
    }

    #[test]
    fn analog_rejects_bad_bin_width() {
        let aspec = AnalogSpec {
            gain_mean: 1.0,
            gain_rel_std: 0.0,
            bin_width_ps: Duration::ZERO,
        };
        assert!(
            analog_trace(&[], &ideal(), &aspec, Duration::from_us(1), &RandomStream::new(1))
                .is_err()
        );
    }
}
