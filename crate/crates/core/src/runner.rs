//! End-to-end experiment orchestration: wiring source -> optics ->
//! detectors -> electronics -> estimators, background measurement,
//! visibility scans, multi-trial statistics, and the two-method comparison.

use std::collections::BTreeMap;

use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::detection::{analog_trace, detect, strip, ClickRecord, DetectorId};
use crate::electronics::{
    and_gate, count_scaler, default_off_peak_regions, estimate_accidentals, tac_process,
    tic_process, CountsSummary, Histogram, TacSpec, TicSpec,
};
use crate::error::{Error, Result};
use crate::estimators::{
    correction_alpha, correction_beta, correction_gamma, eta_analog, eta_conditional, eta_corrected,
    eta_raw, infer_k, lsa_fit, ConditionalCorrections, CorrectionFactors, EfficiencyEstimate,
    LsaFit, Method, VisibilityScan,
};
use crate::optics::{
    accept_triggers, apply_loss, branch_photons, fiber_delay, pbs_select, pockels_apply,
    polarizer_apply, Branch, LossElement, Photon, PolarizerSpec,
};
use crate::report::{
    AnalogDetail, Artifacts, ComparisonDetail, ConditionalDetail, Fig7Curves, RunOutput,
    TrialReport,
};
use crate::scenario::{ElectronicsConfig, ElementConfig, MethodConfig, Scenario, SCHEMA_VERSION};
use crate::source::generate_pairs;
use crate::timebase::{Duration, RandomStream, TimeStamp};

// Stream tags: one fixed identity per stochastic element, so adding an
// element never perturbs the draws of the others.
const TAG_MAIN: u64 = 0x01;
const TAG_BACKGROUND: u64 = 0x02;
const TAG_SCAN: u64 = 0x10;
const TAG_SCAN_BG: u64 = 0x11;
const TAG_FIG7_OFF: u64 = 0x12;
const TAG_COINC_SEGMENT: u64 = 0x13;
const TAG_COINC_SEGMENT_BG: u64 = 0x14;
const TAG_TRIAL: u64 = 0x20;
const TAG_ANALOG_CAL: u64 = 0x30;

const TAG_SOURCE: u64 = 0x100;
const TAG_SIG_CHAIN: u64 = 0x200;
const TAG_IDL_CHAIN: u64 = 0x300;
const TAG_SIG_DET: u64 = 0x400;
const TAG_IDL_DET: u64 = 0x500;

/// Per-acquisition adjustments the orchestrator applies on top of the
/// static scenario (scan angle, pump blocked, trigger cable pulled).
#[derive(Debug, Clone, Copy, Default)]
pub struct SimOverrides {
    pub pair_rate: Option<f64>,
    pub scan_angle_deg: Option<f64>,
    pub pockels_disabled: bool,
}

/// Trigger statistics of the Pockels driver during one acquisition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PockelsStats {
    pub raw_triggers: u64,
    pub accepted_triggers: u64,
}

/// One simulated acquisition: click streams (and analog traces where
/// configured) per detector.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub clicks: BTreeMap<String, Vec<ClickRecord>>,
    pub traces: BTreeMap<String, Vec<f64>>,
    pub pockels: Option<PockelsStats>,
}

impl SimOutput {
    pub fn scaler(&self, detector: &str, gate: Duration) -> Result<u64> {
        let clicks = self
            .clicks
            .get(detector)
            .ok_or_else(|| Error::config(format!("no clicks for detector '{detector}'")))?;
        count_scaler(&strip(clicks), gate)
    }

    pub fn times(&self, detector: &str) -> Result<Vec<TimeStamp>> {
        Ok(strip(self.clicks.get(detector).ok_or_else(|| {
            Error::config(format!("no clicks for detector '{detector}'"))
        })?))
    }
}

fn detector_index(s: &Scenario, name: &str) -> u32 {
    s.detectors.keys().position(|k| k == name).unwrap_or(0) as u32
}

fn apply_chain(
    mut photons: Vec<Photon>,
    chain: &[ElementConfig],
    base: &RandomStream,
    scan_angle: Option<f64>,
    triggers: Option<&[TimeStamp]>,
    pockels_disabled: bool,
) -> Result<(Vec<Photon>, Option<PockelsStats>)> {
    let mut stats = None;
    for (idx, elem) in chain.iter().enumerate() {
        let stream = base.substream(idx as u64);
        photons = match elem {
            ElementConfig::Loss { transmittance } => apply_loss(
                &photons,
                &LossElement {
                    transmittance: *transmittance,
                },
                &stream,
            )?,
            ElementConfig::Polarizer {
                angle_deg,
                extinction,
                rotatable,
            } => {
                let angle = match (rotatable, scan_angle) {
                    (true, Some(a)) => a,
                    _ => *angle_deg,
                };
                polarizer_apply(
                    &photons,
                    &PolarizerSpec {
                        angle_deg: angle,
                        extinction: *extinction,
                    },
                    &stream,
                )?
            }
            ElementConfig::Pbs { port } => pbs_select(&photons, *port),
            ElementConfig::Fiber {
                delay_ps,
                transmittance,
            } => fiber_delay(
                &photons,
                &crate::optics::FiberSpec {
                    delay_ps: *delay_ps,
                    transmittance: *transmittance,
                },
                &stream,
            )?,
            ElementConfig::Pockels { .. } => {
                let spec = elem.to_pockels().unwrap();
                let trigger_clicks: &[TimeStamp] = if pockels_disabled {
                    &[]
                } else {
                    triggers.ok_or_else(|| {
                        Error::config("pockels element has no trigger clicks available")
                    })?
                };
                let accepted = accept_triggers(trigger_clicks, spec.driver_dead_time_ps);
                stats = Some(PockelsStats {
                    raw_triggers: trigger_clicks.len() as u64,
                    accepted_triggers: accepted.len() as u64,
                });
                pockels_apply(&photons, trigger_clicks, &spec, &stream)?
            }
        };
    }
    Ok((photons, stats))
}

/// Runs one acquisition: pair generation, both optical chains (the signal
/// arm first, so its detector clicks can trigger the Pockels cell on the
/// idler arm), then detection.
pub fn simulate(
    s: &Scenario,
    gate: Duration,
    stream: &RandomStream,
    ov: &SimOverrides,
) -> Result<SimOutput> {
    let mut source = s.source.clone();
    if let Some(rate) = ov.pair_rate {
        source.pair_rate = rate;
    }
    let pairs = generate_pairs(&source, gate, &stream.substream(TAG_SOURCE))?;

    let sig_name = s.roles.signal_detector.clone();
    let idl_name = s.roles.idler_detector.clone();
    let sig_det = s.detector(&sig_name)?.clone();
    let idl_det = s.detector(&idl_name)?.clone();

    let signal_photons = branch_photons(&pairs, Branch::Signal);
    let (signal_photons, _) = apply_chain(
        signal_photons,
        &s.signal_chain,
        &stream.substream(TAG_SIG_CHAIN),
        ov.scan_angle_deg,
        None,
        true,
    )?;
    let signal_clicks = detect(
        &signal_photons,
        &sig_det.to_spec_with_stray(),
        gate,
        &stream.substream(TAG_SIG_DET),
        DetectorId(detector_index(s, &sig_name)),
    )?;

    let trigger_times = strip(&signal_clicks);
    let idler_photons = branch_photons(&pairs, Branch::Idler);
    let (idler_photons, pockels) = apply_chain(
        idler_photons,
        &s.idler_chain,
        &stream.substream(TAG_IDL_CHAIN),
        ov.scan_angle_deg,
        Some(&trigger_times),
        ov.pockels_disabled,
    )?;
    let idler_clicks = detect(
        &idler_photons,
        &idl_det.to_spec_with_stray(),
        gate,
        &stream.substream(TAG_IDL_DET),
        DetectorId(detector_index(s, &idl_name)),
    )?;

    let mut traces = BTreeMap::new();
    if s.method == MethodConfig::Analog {
        for (name, det, photons) in [
            (&sig_name, &sig_det, &signal_photons),
            (&idl_name, &idl_det, &idler_photons),
        ] {
            let aspec = det.analog.as_ref().ok_or_else(|| {
                Error::config(format!("detectors.{name}.analog required for analog method"))
            })?;
            let tag = if name == &sig_name { TAG_SIG_DET } else { TAG_IDL_DET };
            traces.insert(
                name.clone(),
                analog_trace(
                    photons,
                    &det.to_spec_with_stray(),
                    aspec,
                    gate,
                    &stream.substream(tag).substream(1),
                )?,
            );
        }
    }

    let mut clicks = BTreeMap::new();
    clicks.insert(sig_name, signal_clicks);
    clicks.insert(idl_name, idler_clicks);
    Ok(SimOutput {
        clicks,
        traces,
        pockels,
    })
}

/// Re-runs the trigger arm with the parametric fluorescence turned off
/// (pump rotated): pair rate zero, same dark and stray rates. Returns the
/// trigger-detector count.
pub fn measure_background(s: &Scenario, gate: Duration, stream: &RandomStream) -> Result<u64> {
    let sim = simulate(
        s,
        gate,
        stream,
        &SimOverrides {
            pair_rate: Some(0.0),
            pockels_disabled: true,
            ..Default::default()
        },
    )?;
    sim.scaler(s.trigger_name(), gate)
}

/// Full background acquisition (all detectors), used by the analysis
/// pipelines that need both arms.
fn background_run(
    s: &Scenario,
    gate: Duration,
    stream: &RandomStream,
    scan_angle: Option<f64>,
) -> Result<SimOutput> {
    simulate(
        s,
        gate,
        stream,
        &SimOverrides {
            pair_rate: Some(0.0),
            scan_angle_deg: scan_angle,
            pockels_disabled: true,
        },
    )
}

/// Everything the coincidence pipeline extracts from one acquisition.
#[derive(Debug, Clone)]
pub struct CoincidenceAnalysis {
    pub counts: CountsSummary,
    pub corrections: CorrectionFactors,
    pub raw_eta: f64,
    pub corrected: EfficiencyEstimate,
    pub histogram: Option<Histogram>,
    pub tic_histograms: Vec<Histogram>,
}

/// Runs the configured coincidence electronics over one acquisition and
/// applies the full corrected estimator.
pub fn analyze_coincidence(
    s: &Scenario,
    sim: &SimOutput,
    background: &SimOutput,
    gate: Duration,
) -> Result<CoincidenceAnalysis> {
    let elec = s
        .electronics
        .as_ref()
        .ok_or_else(|| Error::config("no electronics configured"))?;
    let trigger = s.trigger_name().to_string();
    let dut = s.roles.dut.clone();
    let dut_cfg = s.detector(&dut)?.clone();
    let (start_name, stop_name) = {
        let (a, b) = elec.start_stop();
        (a.to_string(), b.to_string())
    };

    let starts = sim.times(&start_name)?;
    let stops = sim.times(&stop_name)?;
    let n_start_scaler = starts.len() as u64;
    let n_stop_scaler = stops.len() as u64;
    let gate_s = gate.as_secs_f64();
    let start_rate = n_start_scaler as f64 / gate_s;
    let stop_rate = n_stop_scaler as f64 / gate_s;
    let trigger_scaler = sim.scaler(&trigger, gate)?;
    let dut_scaler = sim.scaler(&dut, gate)?;
    let dut_rate = dut_scaler as f64 / gate_s;

    // The background acquisition runs at a much lower total rate, so the
    // trigger detector loses a smaller fraction of its clicks to dead time
    // than during the main acquisition. Rescale the measured background to
    // the main run's live fraction before subtracting.
    let trig_dead = s.detector(&trigger)?.dead_time_ps;
    let live_main = correction_gamma(trigger_scaler as f64 / gate_s, trig_dead)?;
    let live_bg_run =
        correction_gamma(background.scaler(&trigger, gate)? as f64 / gate_s, trig_dead)?;
    let bg_trigger = background.scaler(&trigger, gate)? as f64 * live_main / live_bg_run;

    let gamma = correction_gamma(dut_rate, dut_cfg.dead_time_ps)?;

    match elec {
        ElectronicsConfig::Tac {
            stop_delay_line_ps,
            conversion_dead_time_ps,
            has_valid_start,
            sca_window_ps,
            mca_bin_ps,
            histogram_range_ps,
            off_peak_distance_windows,
            ..
        } => {
            let spec = TacSpec {
                stop_delay_line_ps: *stop_delay_line_ps,
                conversion_dead_time_ps: *conversion_dead_time_ps,
                has_valid_start: *has_valid_start,
                sca_window_ps: *sca_window_ps,
                mca_bin_ps: *mca_bin_ps,
                histogram_range_ps: *histogram_range_ps,
            };
            let delayed: Vec<TimeStamp> =
                stops.iter().map(|&t| t + *stop_delay_line_ps).collect();
            let res = tac_process(&starts, &delayed, &spec)?;
            let peak = res.histogram.peak_ps().ok_or_else(|| {
                Error::invalid("empty coincidence histogram; cannot locate the peak")
            })?;
            let extent = Duration(
                res.histogram.bin_width_ps.as_ps() * res.histogram.counts.len() as i64,
            );
            let regions =
                default_off_peak_regions(extent, *sca_window_ps, *off_peak_distance_windows);
            let n_accidental =
                estimate_accidentals(&res.histogram, *sca_window_ps, &regions)?;
            let alpha = correction_alpha(stop_rate, Duration(peak))?;

            // Trigger counting and the busy correction. When the trigger
            // feeds the start input and the TAC reports valid starts,
            // N_trigger is the valid-start count itself. Otherwise the raw
            // scaler over-counts relative to the armed starts and the
            // valid/raw ratio divides it out.
            let (n_trigger, n_bg, beta) = if trigger == start_name && *has_valid_start {
                let bg_starts = background.times(&start_name)?;
                let bg_delayed: Vec<TimeStamp> = background
                    .times(&stop_name)?
                    .iter()
                    .map(|&t| t + *stop_delay_line_ps)
                    .collect();
                let bg_res = tac_process(&bg_starts, &bg_delayed, &spec)?;
                // Scale the background valid-start count by the dead-time
                // live fractions and by the TAC arming fractions of the two
                // acquisitions, both measured.
                let n_bg = if bg_res.raw_start_count == 0 || res.raw_start_count == 0 {
                    0.0
                } else {
                    let arm_main =
                        res.valid_start_count as f64 / res.raw_start_count as f64;
                    let arm_bg =
                        bg_res.valid_start_count as f64 / bg_res.raw_start_count as f64;
                    bg_res.valid_start_count as f64 * (live_main / live_bg_run)
                        * (arm_main / arm_bg)
                };
                (res.valid_start_count, n_bg, 1.0)
            } else {
                let beta = correction_beta(res.raw_start_count, res.valid_start_count)?;
                (trigger_scaler, bg_trigger, beta)
            };

            let counts = CountsSummary {
                n_trigger,
                n_signal: dut_scaler,
                n_coincidence: res.n_coincidence,
                n_accidental,
                n_background: n_bg,
                t_gate_ps: gate,
                stop_rate,
                start_rate,
            };
            let cf = CorrectionFactors {
                alpha,
                beta,
                gamma,
                t_signal: s.estimator.t_signal,
            };
            let raw = eta_raw(res.n_coincidence as f64, trigger_scaler as f64)?;
            let corrected = eta_corrected(&counts, &cf)?;
            Ok(CoincidenceAnalysis {
                counts,
                corrections: cf,
                raw_eta: raw,
                corrected,
                histogram: Some(res.histogram),
                tic_histograms: Vec::new(),
            })
        }
        ElectronicsConfig::Tic {
            stop_delay_line_ps,
            resolution_ps,
            histogram_bin_ps,
            n_pairs_target,
            n_subsamples,
            histogram_range_ps,
            coincidence_window_ps,
            off_peak_distance_windows,
            ..
        } => {
            if trigger != start_name {
                return Err(Error::config(
                    "TIC pipeline requires the trigger detector on the start input",
                ));
            }
            let spec = TicSpec {
                resolution_ps: *resolution_ps,
                histogram_bin_ps: *histogram_bin_ps,
                n_pairs_target: *n_pairs_target,
                n_subsamples: *n_subsamples,
                histogram_range_ps: *histogram_range_ps,
            };
            let delayed: Vec<TimeStamp> =
                stops.iter().map(|&t| t + *stop_delay_line_ps).collect();
            let res = tic_process(&starts, &delayed, &spec)?;
            if res.measurements.is_empty() {
                return Err(Error::invalid("TIC collected no start-stop couples"));
            }
            let mut summed = res.subsamples[0].clone();
            for h in &res.subsamples[1..] {
                summed.merge(h)?;
            }
            let peak = summed
                .peak_ps()
                .ok_or_else(|| Error::invalid("empty TIC histogram"))?;
            let regions = default_off_peak_regions(
                *histogram_range_ps,
                *coincidence_window_ps,
                *off_peak_distance_windows,
            );
            let n_accidental =
                estimate_accidentals(&summed, *coincidence_window_ps, &regions)?;
            let alpha = correction_alpha(stop_rate, Duration(peak))?;
            let (lo, hi) = *coincidence_window_ps;
            let n_meas = res.measurements.len() as u64;
            let n_coincidence: u64 = res
                .measurements
                .iter()
                .filter(|m| **m >= lo && **m <= hi)
                .count() as u64;
            // Each measurement consumes one armed start; the background
            // fraction of those follows the scaler rates.
            let bg_frac = if trigger_scaler > 0 {
                bg_trigger / trigger_scaler as f64
            } else {
                0.0
            };
            let counts = CountsSummary {
                n_trigger: n_meas,
                n_signal: dut_scaler,
                n_coincidence,
                n_accidental,
                n_background: n_meas as f64 * bg_frac,
                t_gate_ps: gate,
                stop_rate,
                start_rate,
            };
            let cf = CorrectionFactors {
                alpha,
                beta: 1.0,
                gamma,
                t_signal: s.estimator.t_signal,
            };
            let raw = eta_raw(n_coincidence as f64, n_meas as f64)?;
            let mut corrected = eta_corrected(&counts, &cf)?;
            // The subsample spread is the instrument's own uncertainty
            // estimate; use it when it is resolvable.
            let per_sub = res.window_counts(lo, hi);
            if per_sub.len() >= 2 {
                let m = per_sub.len() as f64;
                let etas: Vec<f64> = per_sub
                    .iter()
                    .map(|&nc_i| {
                        let scale = 1.0 / m;
                        (nc_i as f64 - n_accidental * scale)
                            / ((n_meas as f64 - counts.n_background) * scale)
                            / (cf.alpha * cf.gamma * cf.t_signal)
                    })
                    .collect();
                let mean = etas.iter().sum::<f64>() / m;
                let var = etas.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (m - 1.0);
                let se = (var / m).sqrt();
                if se > 0.0 {
                    corrected.std_uncertainty = se;
                }
            }
            Ok(CoincidenceAnalysis {
                counts,
                corrections: cf,
                raw_eta: raw,
                corrected,
                histogram: Some(summed),
                tic_histograms: res.subsamples,
            })
        }
        ElectronicsConfig::AndGate { a, b, window_ps } => {
            let ta = sim.times(a)?;
            let tb = sim.times(b)?;
            let n_coincidence = and_gate(&ta, &tb, *window_ps)?;
            // Accidental rate of two uncorrelated streams within the window.
            let rate_a = ta.len() as f64 / gate_s;
            let rate_b = tb.len() as f64 / gate_s;
            let n_accidental = rate_a * rate_b * window_ps.as_secs_f64() * gate_s;
            let counts = CountsSummary {
                n_trigger: trigger_scaler,
                n_signal: dut_scaler,
                n_coincidence,
                n_accidental,
                n_background: bg_trigger,
                t_gate_ps: gate,
                stop_rate,
                start_rate,
            };
            let cf = CorrectionFactors {
                alpha: 1.0,
                beta: 1.0,
                gamma,
                t_signal: s.estimator.t_signal,
            };
            let raw = eta_raw(n_coincidence as f64, trigger_scaler as f64)?;
            let corrected = eta_corrected(&counts, &cf)?;
            Ok(CoincidenceAnalysis {
                counts,
                corrections: cf,
                raw_eta: raw,
                corrected,
                histogram: None,
                tic_histograms: Vec::new(),
            })
        }
    }
}

/// One visibility scan plus its matched background scan and the trigger
/// statistics needed for the live-fraction correction.
#[derive(Debug, Clone)]
pub struct ScanAcquisition {
    pub scan: VisibilityScan,
    pub background: Option<VisibilityScan>,
    pub raw_triggers: u64,
    pub accepted_triggers: u64,
    pub total_time_s: f64,
}

impl ScanAcquisition {
    /// Combined electrical live fraction: driver acceptance times the
    /// trigger detector's own dead-time live fraction.
    pub fn pockels_live_fraction(&self, trigger_dead_time: Duration) -> Result<f64> {
        let driver = if self.raw_triggers == 0 {
            1.0
        } else {
            self.accepted_triggers as f64 / self.raw_triggers as f64
        };
        let rate = self.raw_triggers as f64 / self.total_time_s;
        Ok(driver * correction_gamma(rate, trigger_dead_time)?)
    }

    pub fn trigger_rate(&self) -> f64 {
        self.raw_triggers as f64 / self.total_time_s
    }

    pub fn accepted_rate(&self) -> f64 {
        self.accepted_triggers as f64 / self.total_time_s
    }
}

fn acquire_scan(
    s: &Scenario,
    angles: &[f64],
    integration: Duration,
    stream: &RandomStream,
    with_background: bool,
) -> Result<ScanAcquisition> {
    let idler = s.roles.idler_detector.clone();
    let mut counts = Vec::with_capacity(angles.len());
    let mut bg_counts = Vec::with_capacity(angles.len());
    let mut raw = 0u64;
    let mut accepted = 0u64;
    for (i, &angle) in angles.iter().enumerate() {
        let sim = simulate(
            s,
            integration,
            &stream.substream(TAG_SCAN).substream(i as u64),
            &SimOverrides {
                scan_angle_deg: Some(angle),
                ..Default::default()
            },
        )?;
        counts.push(sim.scaler(&idler, integration)?);
        if let Some(p) = sim.pockels {
            raw += p.raw_triggers;
            accepted += p.accepted_triggers;
        }
        if with_background {
            let bg = background_run(
                s,
                integration,
                &stream.substream(TAG_SCAN_BG).substream(i as u64),
                Some(angle),
            )?;
            bg_counts.push(bg.scaler(&idler, integration)?);
        }
    }
    let scan = VisibilityScan {
        angles_deg: angles.to_vec(),
        counts,
        integration_time_ps: integration,
    };
    let background = with_background.then(|| VisibilityScan {
        angles_deg: angles.to_vec(),
        counts: bg_counts,
        integration_time_ps: integration,
    });
    Ok(ScanAcquisition {
        scan,
        background,
        raw_triggers: raw,
        accepted_triggers: accepted,
        total_time_s: integration.as_secs_f64() * angles.len() as f64,
    })
}

/// Simulates one acquisition per polarizer angle (fresh derived sub-seed
/// each) plus the paired background scan with the pump rotated.
pub fn run_visibility_scan(
    s: &Scenario,
    angles: &[f64],
    integration: Duration,
) -> Result<ScanAcquisition> {
    s.validate()?;
    if integration.is_negative() {
        return Err(Error::invalid("integration must be >= 0"));
    }
    let with_bg = s.scan.as_ref().map(|c| c.background).unwrap_or(true);
    acquire_scan(
        s,
        angles,
        integration,
        &RandomStream::new(s.seed),
        with_bg,
    )
}

fn check_pockels_rate(s: &Scenario, acq: &ScanAcquisition) -> Result<()> {
    if let Some(ElementConfig::Pockels {
        max_trigger_rate, ..
    }) = s.pockels_element()
    {
        let rate = acq.trigger_rate();
        if rate > *max_trigger_rate {
            return Err(Error::OutOfRegime(format!(
                "trigger rate {rate:.0}/s exceeds the Pockels driver maximum {max_trigger_rate:.0}/s"
            )));
        }
    }
    Ok(())
}

fn conditional_from_scan(
    s: &Scenario,
    acq: &ScanAcquisition,
) -> Result<(EfficiencyEstimate, LsaFit, ConditionalDetail)> {
    check_pockels_rate(s, acq)?;
    let trigger_dead = s.detector(&s.roles.signal_detector)?.dead_time_ps;
    let live = acq.pockels_live_fraction(trigger_dead)?;
    let corrections = ConditionalCorrections {
        pockels_live_fraction: live,
        flip_efficiency: s.estimator.flip_efficiency,
        t_signal_polarizer: s.estimator.t_signal_polarizer,
    };
    let (estimate, fit) = eta_conditional(&acq.scan, acq.background.as_ref(), &corrections)?;
    let detail = ConditionalDetail {
        fit: fit.clone(),
        pockels_live_fraction: live,
        trigger_rate: acq.trigger_rate(),
        accepted_trigger_rate: acq.accepted_rate(),
    };
    Ok((estimate, fit, detail))
}

fn base_report(s: &Scenario) -> Result<TrialReport> {
    let truth = s.detector(&s.roles.dut)?.eta;
    Ok(TrialReport {
        schema_version: SCHEMA_VERSION,
        method: s.method,
        seed: s.seed,
        gate_s: s.gate_s,
        ground_truth_eta: truth,
        estimates: Vec::new(),
        raw_eta: None,
        counts: None,
        corrections: None,
        conditional: None,
        comparison: None,
        analog: None,
        files: Vec::new(),
    })
}

/// Deterministic single-trial execution of the configured method.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput> {
    s.validate()?;
    run_scenario_with_stream(s, &RandomStream::new(s.seed))
}

fn run_scenario_with_stream(s: &Scenario, stream: &RandomStream) -> Result<RunOutput> {
    let gate = s.gate();
    let mut report = base_report(s)?;
    let mut artifacts = Artifacts::default();

    match s.method {
        MethodConfig::Coincidence => {
            let sim = simulate(
                s,
                gate,
                &stream.substream(TAG_MAIN),
                &SimOverrides {
                    pockels_disabled: true,
                    ..Default::default()
                },
            )?;
            let bg = background_run(s, gate, &stream.substream(TAG_BACKGROUND), None)?;
            let analysis = analyze_coincidence(s, &sim, &bg, gate)?;
            report.estimates.push(analysis.corrected);
            report.raw_eta = Some(analysis.raw_eta);
            report.counts = Some(analysis.counts);
            report.corrections = Some(analysis.corrections);
            artifacts.histogram = analysis.histogram;
            artifacts.tic_histograms = analysis.tic_histograms;
            artifacts.clicks = sim.clicks.into_iter().collect();
        }
        MethodConfig::ConditionalRotation => {
            let scan_cfg = s.scan.as_ref().unwrap();
            let acq = acquire_scan(
                s,
                &scan_cfg.angles_deg,
                Duration::from_secs_f64(scan_cfg.integration_s),
                stream,
                scan_cfg.background,
            )?;
            let (estimate, _fit, detail) = conditional_from_scan(s, &acq)?;
            report.estimates.push(estimate);
            report.conditional = Some(detail);
            artifacts.scan = Some(acq.scan);
            artifacts.background_scan = acq.background;
        }
        MethodConfig::Compare => {
            let out = run_comparison_with_stream(s, stream)?;
            return Ok(out);
        }
        MethodConfig::Analog => {
            let sim = simulate(
                s,
                gate,
                &stream.substream(TAG_MAIN),
                &SimOverrides {
                    pockels_disabled: true,
                    ..Default::default()
                },
            )?;
            let trigger = s.trigger_name().to_string();
            let dut = s.roles.dut.clone();
            let k = match s.estimator.analog_k {
                Some(k) => k,
                None => {
                    // Pulse-height calibration: sample each detector's
                    // single-detection gain distribution.
                    let cal = |name: &str, tag: u64| -> Result<Vec<f64>> {
                        let det = s.detector(name)?;
                        let aspec = det.analog.as_ref().unwrap();
                        let mut rng = stream.substream(TAG_ANALOG_CAL).substream(tag).rng();
                        let sigma = aspec.gain_rel_std * aspec.gain_mean;
                        Ok(if sigma > 0.0 {
                            let normal = rand_distr::Normal::new(aspec.gain_mean, sigma)
                                .map_err(|e| Error::invalid(e.to_string()))?;
                            (0..100_000)
                                .map(|_| normal.sample(&mut rng).max(0.0))
                                .collect()
                        } else {
                            vec![aspec.gain_mean; 1_000]
                        })
                    };
                    infer_k(&cal(&trigger, 0)?, &cal(&dut, 1)?)?
                }
            };
            let t1 = sim
                .traces
                .get(&trigger)
                .ok_or_else(|| Error::config("missing trigger trace"))?;
            let t2 = sim
                .traces
                .get(&dut)
                .ok_or_else(|| Error::config("missing DUT trace"))?;
            let estimate = eta_analog(t1, t2, k)?;
            let bin_w = s.detector(&trigger)?.analog.as_ref().unwrap().bin_width_ps;
            report.estimates.push(estimate);
            report.analog = Some(AnalogDetail {
                k_used: k,
                pair_rate_bin_product: s.source.pair_rate * bin_w.as_secs_f64(),
            });
            artifacts.clicks = sim.clicks.into_iter().collect();
        }
    }
    Ok(RunOutput { report, artifacts })
}

fn circular_phase_separation_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// The two-method comparison: a single simulated campaign feeds both
/// estimators. The rotation-on scan supplies the conditional estimate while
/// its clicks simultaneously drive the coincidence electronics (the with-
/// rotation curve); matched rotation-off acquisitions give the without-
/// rotation curve and a dedicated rotation-off segment at the first angle
/// gives the corrected coincidence estimate.
pub fn run_comparison(s: &Scenario) -> Result<RunOutput> {
    s.validate()?;
    run_comparison_with_stream(s, &RandomStream::new(s.seed))
}

fn run_comparison_with_stream(s: &Scenario, stream: &RandomStream) -> Result<RunOutput> {
    let scan_cfg = s
        .scan
        .as_ref()
        .ok_or_else(|| Error::config("compare requires [scan]"))?;
    let angles = scan_cfg.angles_deg.clone();
    let integration = Duration::from_secs_f64(scan_cfg.integration_s);
    let idler = s.roles.idler_detector.clone();

    // Rotation-on scan: conditional counts and coincidence curve from the
    // same clicks.
    let mut counts = Vec::with_capacity(angles.len());
    let mut bg_counts = Vec::with_capacity(angles.len());
    let mut nc_with = Vec::with_capacity(angles.len());
    let mut nc_without = Vec::with_capacity(angles.len());
    let mut raw_triggers = 0u64;
    let mut accepted_triggers = 0u64;
    for (i, &angle) in angles.iter().enumerate() {
        let sim = simulate(
            s,
            integration,
            &stream.substream(TAG_SCAN).substream(i as u64),
            &SimOverrides {
                scan_angle_deg: Some(angle),
                ..Default::default()
            },
        )?;
        counts.push(sim.scaler(&idler, integration)?);
        if let Some(p) = sim.pockels {
            raw_triggers += p.raw_triggers;
            accepted_triggers += p.accepted_triggers;
        }
        nc_with.push(coincidences_only(s, &sim)?);

        let sim_off = simulate(
            s,
            integration,
            &stream.substream(TAG_FIG7_OFF).substream(i as u64),
            &SimOverrides {
                scan_angle_deg: Some(angle),
                pockels_disabled: true,
                ..Default::default()
            },
        )?;
        nc_without.push(coincidences_only(s, &sim_off)?);

        if scan_cfg.background {
            let bg = background_run(
                s,
                integration,
                &stream.substream(TAG_SCAN_BG).substream(i as u64),
                Some(angle),
            )?;
            bg_counts.push(bg.scaler(&idler, integration)?);
        }
    }
    let acq = ScanAcquisition {
        scan: VisibilityScan {
            angles_deg: angles.clone(),
            counts,
            integration_time_ps: integration,
        },
        background: scan_cfg.background.then(|| VisibilityScan {
            angles_deg: angles.clone(),
            counts: bg_counts,
            integration_time_ps: integration,
        }),
        raw_triggers,
        accepted_triggers,
        total_time_s: integration.as_secs_f64() * angles.len() as f64,
    };
    let (cond_estimate, _fit, cond_detail) = conditional_from_scan(s, &acq)?;

    // Dedicated rotation-off coincidence run at the first scan angle.
    let coinc_gate = Duration::from_secs_f64(scan_cfg.coincidence_integration_s.ok_or_else(
        || Error::config("compare requires scan.coincidence_integration_s"),
    )?);
    let coinc_angle = angles.first().copied().unwrap_or(0.0);
    let sim_coinc = simulate(
        s,
        coinc_gate,
        &stream.substream(TAG_COINC_SEGMENT),
        &SimOverrides {
            scan_angle_deg: Some(coinc_angle),
            pockels_disabled: true,
            ..Default::default()
        },
    )?;
    let bg_coinc = simulate(
        s,
        coinc_gate,
        &stream.substream(TAG_COINC_SEGMENT_BG),
        &SimOverrides {
            pair_rate: Some(0.0),
            scan_angle_deg: Some(coinc_angle),
            pockels_disabled: true,
        },
    )?;
    let analysis = analyze_coincidence(s, &sim_coinc, &bg_coinc, coinc_gate)?;

    // Fitted phases of the two coincidence curves differ by 90 degrees for
    // a half-wave rotation.
    let var_with: Vec<f64> = nc_with.iter().map(|&c| (c as f64).max(1.0)).collect();
    let y_with: Vec<f64> = nc_with.iter().map(|&c| c as f64).collect();
    let fit_with = lsa_fit(&angles, &y_with, &var_with, 0.0)?;
    let var_without: Vec<f64> = nc_without.iter().map(|&c| (c as f64).max(1.0)).collect();
    let y_without: Vec<f64> = nc_without.iter().map(|&c| c as f64).collect();
    let fit_without = lsa_fit(&angles, &y_without, &var_without, 0.0)?;

    // Rotation efficiency from the with-rotation extremes, when the scan
    // samples them.
    let flip_est = {
        let at = |target: f64| {
            angles
                .iter()
                .position(|&a| circular_phase_separation_deg(a, target) < 1.0)
        };
        match (at(0.0), at(90.0)) {
            (Some(i0), Some(i90)) => {
                let (c0, c90) = (nc_with[i0] as f64, nc_with[i90] as f64);
                (c0 + c90 > 0.0).then(|| c90 / (c0 + c90))
            }
            _ => None,
        }
    };

    let diff = cond_estimate.value - analysis.corrected.value;
    let combined = (cond_estimate.std_uncertainty.powi(2)
        + analysis.corrected.std_uncertainty.powi(2))
    .sqrt();

    let mut report = base_report(s)?;
    report.estimates = vec![analysis.corrected, cond_estimate];
    report.raw_eta = Some(analysis.raw_eta);
    report.counts = Some(analysis.counts);
    report.corrections = Some(analysis.corrections);
    report.conditional = Some(cond_detail);
    report.comparison = Some(ComparisonDetail {
        difference: diff,
        combined_sigma: combined,
        phase_with_deg: fit_with.phase_deg,
        phase_without_deg: fit_without.phase_deg,
        phase_separation_deg: circular_phase_separation_deg(
            fit_with.phase_deg,
            fit_without.phase_deg,
        ),
        flip_efficiency_estimate: flip_est,
    });

    let artifacts = Artifacts {
        histogram: analysis.histogram,
        tic_histograms: Vec::new(),
        scan: Some(acq.scan),
        background_scan: acq.background,
        fig7: Some(Fig7Curves {
            angles_deg: angles,
            with_rotation: nc_with,
            without_rotation: nc_without,
        }),
        clicks: Vec::new(),
    };
    Ok(RunOutput { report, artifacts })
}

/// TAC window counts for one acquisition, without the estimator stack.
fn coincidences_only(s: &Scenario, sim: &SimOutput) -> Result<u64> {
    match s.electronics.as_ref() {
        Some(ElectronicsConfig::Tac {
            start,
            stop,
            stop_delay_line_ps,
            conversion_dead_time_ps,
            has_valid_start,
            sca_window_ps,
            mca_bin_ps,
            histogram_range_ps,
            ..
        }) => {
            let spec = TacSpec {
                stop_delay_line_ps: *stop_delay_line_ps,
                conversion_dead_time_ps: *conversion_dead_time_ps,
                has_valid_start: *has_valid_start,
                sca_window_ps: *sca_window_ps,
                mca_bin_ps: *mca_bin_ps,
                histogram_range_ps: *histogram_range_ps,
            };
            let starts = sim.times(start)?;
            let delayed: Vec<TimeStamp> = sim
                .times(stop)?
                .iter()
                .map(|&t| t + *stop_delay_line_ps)
                .collect();
            Ok(tac_process(&starts, &delayed, &spec)?.n_coincidence)
        }
        _ => Err(Error::config("comparison requires TAC electronics")),
    }
}

/// Aggregate of one method's estimates across trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: Method,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std_dev: f64,
    pub std_error: f64,
    /// Mean of the per-trial reported uncertainties.
    pub mean_reported_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct TrialStats {
    pub n_trials: u64,
    pub per_method: Vec<MethodStats>,
    pub reports: Vec<TrialReport>,
}

/// Runs `n` independent trials; trial `k` uses the stream derived from
/// `(seed, k)`. Aggregation is ordered by trial index.
pub fn run_trials(s: &Scenario, n: u64) -> Result<TrialStats> {
    if n < 2 {
        return Err(Error::invalid("run_trials requires n >= 2"));
    }
    s.validate()?;
    let base = RandomStream::new(s.seed).substream(TAG_TRIAL);
    let mut reports = Vec::with_capacity(n as usize);
    for k in 0..n {
        let out = run_scenario_with_stream(s, &base.substream(k))?;
        reports.push(out.report);
    }
    let n_methods = reports[0].estimates.len();
    let mut per_method = Vec::with_capacity(n_methods);
    for m in 0..n_methods {
        let method = reports[0].estimates[m].method;
        let values: Vec<f64> = reports.iter().map(|r| r.estimates[m].value).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (values.len() as f64 - 1.0);
        let std_dev = var.sqrt();
        let std_error = std_dev / (values.len() as f64).sqrt();
        let mean_reported_sigma = reports
            .iter()
            .map(|r| r.estimates[m].std_uncertainty)
            .sum::<f64>()
            / values.len() as f64;
        per_method.push(MethodStats {
            method,
            values,
            mean,
            std_dev,
            std_error,
            mean_reported_sigma,
        });
    }
    Ok(TrialStats {
        n_trials: n,
        per_method,
        reports,
    })
}

impl TrialStats {
    pub fn by_method(&self, method: Method) -> Option<&MethodStats> {
        self.per_method.iter().find(|m| m.method == method)
    }
}
