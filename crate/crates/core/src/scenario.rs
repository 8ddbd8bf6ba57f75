//! Scenario configuration: the single structured-text document (TOML) that
//! describes a complete experiment, with strict rejection of unknown keys.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detection::{AnalogSpec, DetectorSpec};
use crate::error::{Error, Result};
use crate::optics::PbsPort;
use crate::source::{PhaseMatching, SourceSpec};
use crate::timebase::Duration;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodConfig {
    Coincidence,
    ConditionalRotation,
    Analog,
    Compare,
}

/// One element of an optical chain, in propagation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ElementConfig {
    Loss {
        transmittance: f64,
    },
    Polarizer {
        angle_deg: f64,
        #[serde(default)]
        extinction: f64,
        /// The polarizer rotated by visibility scans.
        #[serde(default)]
        rotatable: bool,
    },
    Pbs {
        /// Which output port continues down this chain.
        port: PbsPort,
    },
    Fiber {
        delay_ps: Duration,
        transmittance: f64,
    },
    Pockels {
        /// Detector whose clicks trigger the driver.
        trigger_source: String,
        trigger_delay_ps: Duration,
        #[serde(default = "d_rise")]
        rise_ps: Duration,
        #[serde(default = "d_flat")]
        flat_top_ps: Duration,
        #[serde(default = "d_tail")]
        fall_tail_ps: Duration,
        flip_efficiency: f64,
        #[serde(default = "d_dead")]
        driver_dead_time_ps: Duration,
        #[serde(default = "d_max_rate")]
        max_trigger_rate: f64,
    },
}

fn d_rise() -> Duration {
    Duration::from_ns(5)
}
fn d_flat() -> Duration {
    Duration::from_ns(180)
}
fn d_tail() -> Duration {
    Duration::from_us(10)
}
fn d_dead() -> Duration {
    Duration::from_us(10)
}
fn d_max_rate() -> f64 {
    1e4
}

impl ElementConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ElementConfig::Loss { .. } => "loss",
            ElementConfig::Polarizer { .. } => "polarizer",
            ElementConfig::Pbs { .. } => "pbs",
            ElementConfig::Fiber { .. } => "fiber",
            ElementConfig::Pockels { .. } => "pockels",
        }
    }

    pub fn to_pockels(&self) -> Option<crate::optics::PockelsSpec> {
        if let ElementConfig::Pockels {
            trigger_delay_ps,
            rise_ps,
            flat_top_ps,
            fall_tail_ps,
            flip_efficiency,
            driver_dead_time_ps,
            max_trigger_rate,
            ..
        } = self
        {
            Some(crate::optics::PockelsSpec {
                trigger_delay_ps: *trigger_delay_ps,
                rise_ps: *rise_ps,
                flat_top_ps: *flat_top_ps,
                fall_tail_ps: *fall_tail_ps,
                flip_efficiency: *flip_efficiency,
                driver_dead_time_ps: *driver_dead_time_ps,
                max_trigger_rate: *max_trigger_rate,
            })
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub eta: f64,
    #[serde(default)]
    pub dark_rate: f64,
    #[serde(default)]
    pub dead_time_ps: Duration,
    #[serde(default = "d_jitter")]
    pub jitter_sigma_ps: Duration,
    /// Stray room light reaching this detector, counts per second.
    #[serde(default)]
    pub stray_light_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analog: Option<AnalogSpec>,
}

fn d_jitter() -> Duration {
    Duration::from_ps(300)
}

impl DetectorConfig {
    /// Detector spec as simulated: stray light is Poisson background at the
    /// detector, indistinguishable from dark counts.
    pub fn to_spec_with_stray(&self) -> DetectorSpec {
        DetectorSpec {
            eta: self.eta,
            dark_rate: self.dark_rate + self.stray_light_rate,
            dead_time_ps: self.dead_time_ps,
            jitter_sigma_ps: self.jitter_sigma_ps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    /// Detector at the end of the signal chain.
    pub signal_detector: String,
    /// Detector at the end of the idler chain.
    pub idler_detector: String,
    /// Detector under calibration; the other one is the trigger.
    pub dut: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ElectronicsConfig {
    Tac {
        start: String,
        stop: String,
        stop_delay_line_ps: Duration,
        #[serde(default)]
        conversion_dead_time_ps: Duration,
        #[serde(default = "d_true")]
        has_valid_start: bool,
        sca_window_ps: (Duration, Duration),
        mca_bin_ps: Duration,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        histogram_range_ps: Option<Duration>,
        #[serde(default = "d_off_peak")]
        off_peak_distance_windows: f64,
    },
    Tic {
        start: String,
        stop: String,
        stop_delay_line_ps: Duration,
        #[serde(default = "d_resolution")]
        resolution_ps: Duration,
        #[serde(default = "d_hist_bin")]
        histogram_bin_ps: Duration,
        #[serde(default = "d_pairs")]
        n_pairs_target: u64,
        #[serde(default = "d_subsamples")]
        n_subsamples: u64,
        histogram_range_ps: Duration,
        coincidence_window_ps: (Duration, Duration),
        #[serde(default = "d_off_peak")]
        off_peak_distance_windows: f64,
    },
    AndGate {
        a: String,
        b: String,
        window_ps: Duration,
    },
}

fn d_true() -> bool {
    true
}
fn d_off_peak() -> f64 {
    5.0
}
fn d_resolution() -> Duration {
    Duration::from_ps(25)
}
fn d_hist_bin() -> Duration {
    Duration::from_ps(100)
}
fn d_pairs() -> u64 {
    10_000
}
fn d_subsamples() -> u64 {
    5
}

impl ElectronicsConfig {
    pub fn start_stop(&self) -> (&str, &str) {
        match self {
            ElectronicsConfig::Tac { start, stop, .. } => (start, stop),
            ElectronicsConfig::Tic { start, stop, .. } => (start, stop),
            ElectronicsConfig::AndGate { a, b, .. } => (a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub angles_deg: Vec<f64>,
    pub integration_s: f64,
    /// Acquire a matched background scan (pump rotated, pairs off) and
    /// subtract it before fitting.
    #[serde(default = "d_true")]
    pub background: bool,
    /// Comparison mode: duration of the dedicated rotation-off coincidence
    /// acquisition at the first scan angle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coincidence_integration_s: Option<f64>,
}

/// Externally supplied calibration inputs for the estimators (quantities
/// the measurement procedure determines by usual techniques beforehand).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Transmittance of the DUT photon path.
    #[serde(default = "d_one")]
    pub t_signal: f64,
    /// Pockels full-rotation efficiency used by the conditional estimator.
    #[serde(default = "d_one")]
    pub flip_efficiency: f64,
    /// Transmittance of the polarizer cube in the trigger photon path.
    #[serde(default = "d_one")]
    pub t_signal_polarizer: f64,
    /// Gain correction for the analog estimator; inferred from simulated
    /// gain calibration samples when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analog_k: Option<f64>,
}

fn d_one() -> f64 {
    1.0
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            t_signal: 1.0,
            flip_efficiency: 1.0,
            t_signal_polarizer: 1.0,
            analog_k: None,
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub seed: u64,
    pub gate_s: f64,
    pub method: MethodConfig,
    pub source: SourceSpec,
    #[serde(default)]
    pub signal_chain: Vec<ElementConfig>,
    #[serde(default)]
    pub idler_chain: Vec<ElementConfig>,
    pub detectors: BTreeMap<String, DetectorConfig>,
    pub roles: Roles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub electronics: Option<ElectronicsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanConfig>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
}

impl Scenario {
    /// Parses a scenario from TOML, rejecting unknown keys anywhere in the
    /// document.
    pub fn from_toml_str(text: &str) -> Result<Scenario> {
        let raw: toml::Value =
            toml::from_str(text).map_err(|e| Error::config(format!("TOML parse: {e}")))?;
        let scenario: Scenario =
            toml::from_str(text).map_err(|e| Error::config(format!("schema: {e}")))?;
        // serde cannot reject unknown keys inside tagged enums, so compare
        // the input keys against a full re-serialization.
        let echo: toml::Value = toml::Value::try_from(&scenario)
            .map_err(|e| Error::config(format!("re-serialize: {e}")))?;
        check_no_unknown_keys(&raw, &echo, "")?;
        if scenario.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                scenario.schema_version
            )));
        }
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize: {e}")))
    }

    pub fn gate(&self) -> Duration {
        Duration::from_secs_f64(self.gate_s)
    }

    pub fn detector(&self, name: &str) -> Result<&DetectorConfig> {
        self.detectors
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown detector '{name}'")))
    }

    /// The trigger detector: the role partner of the DUT.
    pub fn trigger_name(&self) -> &str {
        if self.roles.dut == self.roles.signal_detector {
            &self.roles.idler_detector
        } else {
            &self.roles.signal_detector
        }
    }

    pub fn pockels_element(&self) -> Option<&ElementConfig> {
        self.idler_chain
            .iter()
            .find(|e| matches!(e, ElementConfig::Pockels { .. }))
    }

    pub fn rotatable_polarizer_index(&self) -> Option<usize> {
        self.idler_chain
            .iter()
            .position(|e| matches!(e, ElementConfig::Polarizer { rotatable: true, .. }))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gate_s > 0.0) {
            return Err(Error::config("gate_s must be > 0"));
        }
        self.source
            .validate()
            .map_err(|e| Error::config(format!("source: {e}")))?;
        if self.detectors.is_empty() {
            return Err(Error::config("at least one detector required"));
        }
        for (name, det) in &self.detectors {
            det.to_spec_with_stray()
                .validate()
                .map_err(|e| Error::config(format!("detectors.{name}: {e}")))?;
            if let Some(a) = &det.analog {
                a.validate()
                    .map_err(|e| Error::config(format!("detectors.{name}.analog: {e}")))?;
            }
        }
        for role in [
            &self.roles.signal_detector,
            &self.roles.idler_detector,
            &self.roles.dut,
        ] {
            self.detector(role)
                .map_err(|e| Error::config(format!("roles: {e}")))?;
        }
        if self.roles.signal_detector == self.roles.idler_detector {
            return Err(Error::config(
                "signal_detector and idler_detector must differ",
            ));
        }
        if self.roles.dut != self.roles.signal_detector
            && self.roles.dut != self.roles.idler_detector
        {
            return Err(Error::config("dut must be the signal or idler detector"));
        }
        self.validate_chain(&self.signal_chain, "signal_chain", false)?;
        self.validate_chain(&self.idler_chain, "idler_chain", true)?;
        if let Some(elec) = &self.electronics {
            let (start, stop) = elec.start_stop();
            if start == stop {
                return Err(Error::config("electronics start and stop must differ"));
            }
            for d in [start, stop] {
                self.detector(d)
                    .map_err(|e| Error::config(format!("electronics: {e}")))?;
            }
        }
        if let Some(scan) = &self.scan {
            if scan.angles_deg.is_empty() {
                return Err(Error::config("scan.angles_deg must be non-empty"));
            }
            if scan.integration_s < 0.0 {
                return Err(Error::config("scan.integration_s must be >= 0"));
            }
        }
        for (name, v) in [
            ("t_signal", self.estimator.t_signal),
            ("flip_efficiency", self.estimator.flip_efficiency),
            ("t_signal_polarizer", self.estimator.t_signal_polarizer),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(format!(
                    "estimator.{name} must be in (0, 1], got {v}"
                )));
            }
        }

        match self.method {
            MethodConfig::Coincidence => {
                if self.electronics.is_none() {
                    return Err(Error::config(
                        "method 'coincidence' requires an [electronics] section",
                    ));
                }
            }
            MethodConfig::ConditionalRotation => self.validate_conditional()?,
            MethodConfig::Compare => {
                self.validate_conditional()?;
                match &self.electronics {
                    Some(ElectronicsConfig::Tac { .. }) => {}
                    _ => {
                        return Err(Error::config(
                            "method 'compare' requires TAC electronics",
                        ))
                    }
                }
                let scan = self.scan.as_ref().unwrap();
                if scan.coincidence_integration_s.is_none() {
                    return Err(Error::config(
                        "method 'compare' requires scan.coincidence_integration_s",
                    ));
                }
            }
            MethodConfig::Analog => {
                for name in [&self.roles.signal_detector, &self.roles.idler_detector] {
                    if self.detector(name)?.analog.is_none() {
                        return Err(Error::config(format!(
                            "method 'analog' requires detectors.{name}.analog"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn validate_conditional(&self) -> Result<()> {
        if self.source.phase_matching != PhaseMatching::TypeII {
            return Err(Error::config(
                "conditional rotation requires a type_ii source",
            ));
        }
        let pockels = self.pockels_element().ok_or_else(|| {
            Error::config("conditional rotation requires a pockels element in idler_chain")
        })?;
        if let ElementConfig::Pockels { trigger_source, .. } = pockels {
            if trigger_source != &self.roles.signal_detector {
                return Err(Error::config(format!(
                    "idler_chain.pockels.trigger_source '{trigger_source}' must be the \
                     signal detector '{}'",
                    self.roles.signal_detector
                )));
            }
        }
        if self.rotatable_polarizer_index().is_none() {
            return Err(Error::config(
                "conditional rotation requires a rotatable polarizer in idler_chain",
            ));
        }
        if self.scan.is_none() {
            return Err(Error::config(
                "conditional rotation requires a [scan] section",
            ));
        }
        Ok(())
    }

    fn validate_chain(&self, chain: &[ElementConfig], path: &str, is_idler: bool) -> Result<()> {
        let mut pockels_seen = false;
        for (i, elem) in chain.iter().enumerate() {
            let at =
                |msg: String| Error::config(format!("{path}[{i}] ({}): {msg}", elem.kind_name()));
            match elem {
                ElementConfig::Loss { transmittance } => {
                    crate::optics::LossElement {
                        transmittance: *transmittance,
                    }
                    .validate()
                    .map_err(|e| at(e.to_string()))?;
                }
                ElementConfig::Polarizer {
                    angle_deg,
                    extinction,
                    ..
                } => {
                    crate::optics::PolarizerSpec {
                        angle_deg: *angle_deg,
                        extinction: *extinction,
                    }
                    .validate()
                    .map_err(|e| at(e.to_string()))?;
                }
                ElementConfig::Pbs { .. } => {}
                ElementConfig::Fiber {
                    delay_ps,
                    transmittance,
                } => {
                    crate::optics::FiberSpec {
                        delay_ps: *delay_ps,
                        transmittance: *transmittance,
                    }
                    .validate()
                    .map_err(|e| at(e.to_string()))?;
                }
                ElementConfig::Pockels { trigger_source, .. } => {
                    if !is_idler {
                        return Err(at("pockels is only supported in idler_chain".into()));
                    }
                    if pockels_seen {
                        return Err(at("only one pockels element is supported".into()));
                    }
                    pockels_seen = true;
                    self.detector(trigger_source)
                        .map_err(|e| at(e.to_string()))?;
                    elem.to_pockels()
                        .unwrap()
                        .validate()
                        .map_err(|e| at(e.to_string()))?;
                }
            }
        }
        Ok(())
    }
}

/// Recursively verifies that every key present in `input` also exists in
/// `echo` (the re-serialized parsed config); any extra key is a typo.
fn check_no_unknown_keys(input: &toml::Value, echo: &toml::Value, path: &str) -> Result<()> {
    match (input, echo) {
        (toml::Value::Table(it), toml::Value::Table(et)) => {
            for (k, v) in it {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match et.get(k) {
                    Some(ev) => check_no_unknown_keys(v, ev, &sub)?,
                    None => {
                        return Err(Error::config(format!("unknown key '{sub}'")));
                    }
                }
            }
            Ok(())
        }
        (toml::Value::Array(ia), toml::Value::Array(ea)) => {
            for (i, (iv, ev)) in ia.iter().zip(ea).enumerate() {
                check_no_unknown_keys(iv, ev, &format!("{path}[{i}]"))?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
schema_version = 1
seed = 42
gate_s = 1.0
method = "coincidence"

[source]
pair_rate = 10000.0
pump_wavelength_nm = 351.0
signal_wavelength_nm = 633.0
idler_wavelength_nm = 789.0
phase_matching = "type_i"
collection_overlap = 0.75

[[signal_chain]]
kind = "loss"
transmittance = 0.9

[detectors.d_sig]
eta = 0.486
dark_rate = 200.0

[detectors.d_trig]
eta = 0.45
dark_rate = 200.0

[roles]
signal_detector = "d_sig"
idler_detector = "d_trig"
dut = "d_sig"

[electronics]
kind = "tac"
start = "d_trig"
stop = "d_sig"
stop_delay_line_ps = 1000000
sca_window_ps = [990000, 1010000]
mca_bin_ps = 1000

[estimator]
t_signal = 0.9
"#
        .to_string()
    }

    #[test]
    fn parses_minimal_scenario() {
        let s = Scenario::from_toml_str(&minimal_toml()).unwrap();
        assert_eq!(s.seed, 42);
        assert_eq!(s.trigger_name(), "d_trig");
        assert_eq!(s.detectors.len(), 2);
    }

    #[test]
    fn config_round_trip_is_identical() {
        let s = Scenario::from_toml_str(&minimal_toml()).unwrap();
        let text = s.to_toml_string().unwrap();
        let s2 = Scenario::from_toml_str(&text).unwrap();
        assert_eq!(s, s2);
        // Serialization itself is stable.
        assert_eq!(text, s2.to_toml_string().unwrap());
    }

    #[test]
    fn unknown_top_level_key_rejected() {
        let text = minimal_toml() + "\nunknown_key = 5\n";
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("unknown"), "{err}");
    }

    #[test]
    fn unknown_nested_key_in_tagged_enum_rejected() {
        let text = minimal_toml().replace(
            "mca_bin_ps = 1000",
            "mca_bin_ps = 1000\nmca_bin_misspelled = 7",
        );
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("mca_bin_misspelled"), "{err}");
    }

    #[test]
    fn unknown_chain_element_key_rejected() {
        let text = minimal_toml().replace(
            "transmittance = 0.9",
            "transmittance = 0.9\ntransmitance = 0.9",
        );
        assert!(Scenario::from_toml_str(&text).is_err());
    }

    #[test]
    fn missing_electronics_rejected_for_coincidence() {
        let mut s = Scenario::from_toml_str(&minimal_toml()).unwrap();
        s.electronics = None;
        assert!(s.validate().is_err());
    }

    #[test]
    fn bad_wavelengths_rejected() {
        let text =
            minimal_toml().replace("idler_wavelength_nm = 789.0", "idler_wavelength_nm = 700.0");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn pockels_in_signal_chain_rejected() {
        let mut s = Scenario::from_toml_str(&minimal_toml()).unwrap();
        s.signal_chain.push(ElementConfig::Pockels {
            trigger_source: "d_trig".into(),
            trigger_delay_ps: Duration::from_ns(100),
            rise_ps: d_rise(),
            flat_top_ps: d_flat(),
            fall_tail_ps: d_tail(),
            flip_efficiency: 1.0,
            driver_dead_time_ps: d_dead(),
            max_trigger_rate: 1e4,
        });
        let err = s.validate().unwrap_err();
        assert!(err.to_string().contains("signal_chain[1]"), "{err}");
    }

    #[test]
    fn conditional_requires_type_ii_and_pockels() {
        let mut s = Scenario::from_toml_str(&minimal_toml()).unwrap();
        s.method = MethodConfig::ConditionalRotation;
        assert!(s.validate().is_err());
    }
}
