//! Interactive browser demo: three operations of the calibration simulator
//! exposed through wasm-bindgen. Each entry point builds a scenario from a
//! few slider parameters, runs it, and returns a JSON document for the page
//! to plot. All heavy lifting stays in `twincal-core`; this crate only
//! adapts parameters and serializes results.

use std::collections::BTreeMap;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use twincal_core::error::Result;
use twincal_core::optics::PbsPort;
use twincal_core::runner::{run_comparison, run_scenario};
use twincal_core::scenario::{
    DetectorConfig, ElectronicsConfig, ElementConfig, EstimatorConfig, MethodConfig, Roles,
    ScanConfig, Scenario,
};
use twincal_core::source::{PhaseMatching, SourceSpec};
use twincal_core::timebase::Duration;

fn detector(eta: f64, dark_rate: f64, dead_time_ps: i64) -> DetectorConfig {
    DetectorConfig {
        eta,
        dark_rate,
        dead_time_ps: Duration::from_ps(dead_time_ps),
        jitter_sigma_ps: Duration::from_ps(300),
        stray_light_rate: 0.0,
        analog: None,
    }
}

fn js_err(e: twincal_core::error::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct HistogramOut {
    bin_start_ns: Vec<f64>,
    counts: Vec<u64>,
    window_ns: (f64, f64),
    eta_corrected: f64,
    sigma: f64,
    eta_raw: f64,
    truth: f64,
    n_coincidence: u64,
    n_trigger: u64,
}

fn coincidence_scenario(
    pair_rate: f64,
    eta_dut: f64,
    eta_trigger: f64,
    dark_rate: f64,
    gate_s: f64,
    seed: u64,
) -> Scenario {
    let mut detectors = BTreeMap::new();
    detectors.insert("d_sig".to_string(), detector(eta_dut, dark_rate, 50_000));
    detectors.insert(
        "d_trig".to_string(),
        detector(eta_trigger, dark_rate, 1_000_000),
    );
    Scenario {
        schema_version: 1,
        seed,
        gate_s,
        method: MethodConfig::Coincidence,
        source: SourceSpec {
            pair_rate,
            pump_wavelength_nm: 351.0,
            signal_wavelength_nm: 633.0,
            idler_wavelength_nm: 789.0,
            phase_matching: PhaseMatching::TypeI,
            emission_jitter_sigma_ps: Duration::ZERO,
            collection_overlap: 0.75,
        },
        signal_chain: vec![ElementConfig::Loss { transmittance: 0.9 }],
        idler_chain: vec![ElementConfig::Loss {
            transmittance: 0.64,
        }],
        detectors,
        roles: Roles {
            signal_detector: "d_sig".to_string(),
            idler_detector: "d_trig".to_string(),
            dut: "d_sig".to_string(),
        },
        electronics: Some(ElectronicsConfig::Tac {
            start: "d_trig".to_string(),
            stop: "d_sig".to_string(),
            stop_delay_line_ps: Duration::from_us(1),
            conversion_dead_time_ps: Duration::from_us(1),
            has_valid_start: true,
            sca_window_ps: (Duration::from_ps(990_000), Duration::from_ps(1_010_000)),
            mca_bin_ps: Duration::from_ns(5),
            histogram_range_ps: None,
            off_peak_distance_windows: 5.0,
        }),
        scan: None,
        estimator: EstimatorConfig {
            t_signal: 0.9,
            ..Default::default()
        },
    }
}

fn run_histogram(
    pair_rate: f64,
    eta_dut: f64,
    eta_trigger: f64,
    dark_rate: f64,
    gate_s: f64,
    seed: u64,
) -> Result<String> {
    let s = coincidence_scenario(pair_rate, eta_dut, eta_trigger, dark_rate, gate_s, seed);
    let out = run_scenario(&s)?;
    let hist = out.artifacts.histogram.as_ref().expect("tac histogram");
    let est = out.report.estimates[0];
    let counts = out.report.counts.as_ref().expect("counts");
    let doc = HistogramOut {
        bin_start_ns: (0..hist.counts.len())
            .map(|i| hist.bin_start_ps(i) as f64 / 1_000.0)
            .collect(),
        counts: hist.counts.clone(),
        window_ns: (990.0, 1_010.0),
        eta_corrected: est.value,
        sigma: est.std_uncertainty,
        eta_raw: out.report.raw_eta.unwrap_or(0.0),
        truth: eta_dut,
        n_coincidence: counts.n_coincidence,
        n_trigger: counts.n_trigger,
    };
    Ok(serde_json::to_string(&doc).expect("serialize"))
}

/// Coincidence method: TAC histogram (peak over flat accidentals) plus the
/// raw and corrected efficiency estimates.
#[wasm_bindgen]
pub fn coincidence_histogram(
    pair_rate: f64,
    eta_dut: f64,
    eta_trigger: f64,
    dark_rate: f64,
    gate_s: f64,
    seed: u64,
) -> std::result::Result<String, JsError> {
    run_histogram(pair_rate, eta_dut, eta_trigger, dark_rate, gate_s, seed).map_err(js_err)
}

fn conditional_scenario(
    eta1: f64,
    flip_efficiency: f64,
    pair_rate: f64,
    integration_s: f64,
    seed: u64,
    method: MethodConfig,
    coincidence_integration_s: f64,
) -> Scenario {
    let mut detectors = BTreeMap::new();
    detectors.insert("d1".to_string(), detector(eta1, 200.0, 50_000));
    let mut d2 = detector(0.4, 200.0, 50_000);
    d2.stray_light_rate = 100.0;
    detectors.insert("d2".to_string(), d2);
    Scenario {
        schema_version: 1,
        seed,
        gate_s: 1.0,
        method,
        source: SourceSpec {
            pair_rate,
            pump_wavelength_nm: 351.1,
            signal_wavelength_nm: 702.2,
            idler_wavelength_nm: 702.2,
            phase_matching: PhaseMatching::TypeII,
            emission_jitter_sigma_ps: Duration::ZERO,
            collection_overlap: 0.7,
        },
        signal_chain: vec![
            ElementConfig::Pbs {
                port: PbsPort::Transmit,
            },
            ElementConfig::Loss {
                transmittance: 0.95,
            },
        ],
        idler_chain: vec![
            ElementConfig::Fiber {
                delay_ps: Duration::from_ns(250),
                transmittance: 0.85,
            },
            ElementConfig::Pockels {
                trigger_source: "d1".to_string(),
                trigger_delay_ps: Duration::from_ps(155_000),
                rise_ps: Duration::from_ns(5),
                flat_top_ps: Duration::from_ns(180),
                fall_tail_ps: Duration::from_us(10),
                flip_efficiency,
                driver_dead_time_ps: Duration::from_us(10),
                max_trigger_rate: 1e4,
            },
            ElementConfig::Loss { transmittance: 0.9 },
            ElementConfig::Polarizer {
                angle_deg: 0.0,
                extinction: 0.0,
                rotatable: true,
            },
        ],
        detectors,
        roles: Roles {
            signal_detector: "d1".to_string(),
            idler_detector: "d2".to_string(),
            dut: "d1".to_string(),
        },
        electronics: Some(ElectronicsConfig::Tac {
            start: "d1".to_string(),
            stop: "d2".to_string(),
            stop_delay_line_ps: Duration::from_us(1),
            conversion_dead_time_ps: Duration::from_us(1),
            has_valid_start: true,
            sca_window_ps: (Duration::from_ps(1_240_000), Duration::from_ps(1_260_000)),
            mca_bin_ps: Duration::from_ns(1),
            histogram_range_ps: None,
            off_peak_distance_windows: 5.0,
        }),
        scan: Some(ScanConfig {
            angles_deg: (0..19).map(|k| k as f64 * 10.0).collect(),
            integration_s,
            background: true,
            coincidence_integration_s: Some(coincidence_integration_s),
        }),
        estimator: EstimatorConfig {
            t_signal: 0.95,
            flip_efficiency,
            t_signal_polarizer: 0.95,
            analog_k: None,
        },
    }
}

#[derive(Serialize)]
struct ScanOut {
    angles_deg: Vec<f64>,
    counts: Vec<u64>,
    background: Vec<u64>,
    fit_curve: Vec<f64>,
    visibility: f64,
    sigma_visibility: f64,
    eta_estimate: f64,
    sigma_eta: f64,
    truth: f64,
    live_fraction: f64,
}

fn run_scan(
    eta1: f64,
    flip_efficiency: f64,
    pair_rate: f64,
    integration_s: f64,
    seed: u64,
) -> Result<String> {
    let s = conditional_scenario(
        eta1,
        flip_efficiency,
        pair_rate,
        integration_s,
        seed,
        MethodConfig::ConditionalRotation,
        10.0,
    );
    let out = run_scenario(&s)?;
    let est = out.report.estimates[0];
    let detail = out.report.conditional.as_ref().expect("conditional detail");
    let scan = out.artifacts.scan.as_ref().expect("scan");
    let bg = out.artifacts.background_scan.as_ref().expect("background");
    // The fitted model on top of the subtracted data, re-offset by the mean
    // background so it overlays the raw counts.
    let mean_bg = bg.counts.iter().sum::<u64>() as f64 / bg.counts.len() as f64;
    let fit_curve: Vec<f64> = scan
        .angles_deg
        .iter()
        .map(|&a| detail.fit.predict(a) + mean_bg)
        .collect();
    let doc = ScanOut {
        angles_deg: scan.angles_deg.clone(),
        counts: scan.counts.clone(),
        background: bg.counts.clone(),
        fit_curve,
        visibility: detail.fit.visibility,
        sigma_visibility: detail.fit.sigma_visibility(),
        eta_estimate: est.value,
        sigma_eta: est.std_uncertainty,
        truth: eta1,
        live_fraction: detail.pockels_live_fraction,
    };
    Ok(serde_json::to_string(&doc).expect("serialize"))
}

/// Conditional-rotation method: the visibility scan behind the rotating
/// polarizer, its least-squares fit, and the corrected efficiency.
#[wasm_bindgen]
pub fn visibility_scan(
    eta1: f64,
    flip_efficiency: f64,
    pair_rate: f64,
    integration_s: f64,
    seed: u64,
) -> std::result::Result<String, JsError> {
    run_scan(eta1, flip_efficiency, pair_rate, integration_s, seed).map_err(js_err)
}

#[derive(Serialize)]
struct CompareOut {
    coincidence: f64,
    coincidence_sigma: f64,
    conditional: f64,
    conditional_sigma: f64,
    difference: f64,
    combined_sigma: f64,
    phase_with_deg: f64,
    phase_without_deg: f64,
    angles_deg: Vec<f64>,
    with_rotation: Vec<u64>,
    without_rotation: Vec<u64>,
    truth: f64,
}

fn run_compare(eta1: f64, pair_rate: f64, integration_s: f64, seed: u64) -> Result<String> {
    let s = conditional_scenario(
        eta1,
        1.0,
        pair_rate,
        integration_s,
        seed,
        MethodConfig::Compare,
        integration_s * 12.0,
    );
    let out = run_comparison(&s)?;
    let cmp = out.report.comparison.as_ref().expect("comparison");
    let fig7 = out.artifacts.fig7.as_ref().expect("curves");
    let doc = CompareOut {
        coincidence: out.report.estimates[0].value,
        coincidence_sigma: out.report.estimates[0].std_uncertainty,
        conditional: out.report.estimates[1].value,
        conditional_sigma: out.report.estimates[1].std_uncertainty,
        difference: cmp.difference,
        combined_sigma: cmp.combined_sigma,
        phase_with_deg: cmp.phase_with_deg,
        phase_without_deg: cmp.phase_without_deg,
        angles_deg: fig7.angles_deg.clone(),
        with_rotation: fig7.with_rotation.clone(),
        without_rotation: fig7.without_rotation.clone(),
        truth: eta1,
    };
    Ok(serde_json::to_string(&doc).expect("serialize"))
}

/// Two-method comparison on one simulated campaign: both estimates and the
/// with/without-rotation coincidence curves (90 degrees apart).
#[wasm_bindgen]
pub fn method_comparison(
    eta1: f64,
    pair_rate: f64,
    integration_s: f64,
    seed: u64,
) -> std::result::Result<String, JsError> {
    run_compare(eta1, pair_rate, integration_s, seed).map_err(js_err)
}
