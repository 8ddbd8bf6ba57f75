//! Coincidence acquisition systems: the TAC+MCA+SCA chain, the high
//! resolution time interval counter, and the AND gate, plus scaler counting
//! and accidental estimation from the flat off-peak histogram region.
//!
//! All functions here operate on plain sorted timestamp slices -- the
//! stripped, estimator-safe view of the click records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timebase::{Duration, TimeStamp};

fn check_sorted(xs: &[TimeStamp], name: &str) -> Result<()> {
    if xs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid(format!("{name} not sorted")));
    }
    Ok(())
}

/// Time-to-amplitude converter with MCA histogramming and an SCA window.
///
/// The physical TAC produces a pulse whose height is proportional to the
/// start-stop interval; the MCA is modeled directly in time units (the
/// voltage proportionality is an identity mapping here).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TacSpec {
    /// Electronic delay inserted in the stop channel.
    pub stop_delay_line_ps: Duration,
    /// TAC busy time after each conversion.
    #[serde(default)]
    pub conversion_dead_time_ps: Duration,
    /// Whether the hardware reports the count of starts that actually
    /// armed the converter.
    #[serde(default = "default_true")]
    pub has_valid_start: bool,
    /// SCA voltage window expressed in start-stop time difference (lo, hi).
    pub sca_window_ps: (Duration, Duration),
    /// MCA bin width.
    pub mca_bin_ps: Duration,
    /// Histogram extent; start-stop differences beyond it time out.
    /// Defaults to twice the stop delay line.
    #[serde(default)]
    pub histogram_range_ps: Option<Duration>,
}

fn default_true() -> bool {
    true
}

impl TacSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stop_delay_line_ps.as_ps() <= 0 {
            return Err(Error::invalid("stop_delay_line_ps must be > 0"));
        }
        if self.conversion_dead_time_ps.is_negative() {
            return Err(Error::invalid("conversion_dead_time_ps must be >= 0"));
        }
        let (lo, hi) = self.sca_window_ps;
        if lo >= hi {
            return Err(Error::invalid("sca_window_ps requires lo < hi"));
        }
        if self.mca_bin_ps.as_ps() <= 0 {
            return Err(Error::invalid("mca_bin_ps must be > 0"));
        }
        if hi > self.range() {
            return Err(Error::invalid(
                "sca_window_ps upper edge exceeds histogram range",
            ));
        }
        Ok(())
    }

    pub fn range(&self) -> Duration {
        self.histogram_range_ps
            .unwrap_or(Duration(2 * self.stop_delay_line_ps.as_ps()))
    }
}

/// Time-correlation histogram of start-stop differences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width_ps: Duration,
    /// Time difference of the first bin edge.
    pub origin_ps: i64,
    pub counts: Vec<u64>,
    /// Starts that armed the converter; a start may yield no in-range stop,
    /// so `sum(counts) <= n_starts_processed`.
    pub n_starts_processed: u64,
}

impl Histogram {
    pub fn new(bin_width: Duration, origin_ps: i64, n_bins: usize) -> Histogram {
        Histogram {
            bin_width_ps: bin_width,
            origin_ps,
            counts: vec![0; n_bins],
            n_starts_processed: 0,
        }
    }

    /// Records a difference; returns false when it is out of range.
    pub fn record(&mut self, d: Duration) -> bool {
        let rel = d.as_ps() - self.origin_ps;
        if rel < 0 {
            return false;
        }
        let idx = (rel / self.bin_width_ps.as_ps()) as usize;
        if idx < self.counts.len() {
            self.counts[idx] += 1;
            true
        } else {
            false
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_start_ps(&self, idx: usize) -> i64 {
        self.origin_ps + idx as i64 * self.bin_width_ps.as_ps()
    }

    /// Time difference at the center of the fullest bin; the location of
    /// the coincidence peak for correlated streams.
    pub fn peak_ps(&self) -> Option<i64> {
        let (idx, &max) = self
            .counts
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)?;
        if max == 0 {
            return None;
        }
        Some(self.bin_start_ps(idx) + self.bin_width_ps.as_ps() / 2)
    }

    /// Adds another histogram with the identical bin layout.
    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.bin_width_ps != other.bin_width_ps
            || self.origin_ps != other.origin_ps
            || self.counts.len() != other.counts.len()
        {
            return Err(Error::invalid("histogram layouts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.n_starts_processed += other.n_starts_processed;
        Ok(())
    }
}

/// Scaler totals feeding the corrected-efficiency formula. `n_accidental`
/// and `n_background` are estimated quantities and may be fractional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsSummary {
    pub n_trigger: u64,
    pub n_signal: u64,
    pub n_coincidence: u64,
    pub n_accidental: f64,
    pub n_background: f64,
    pub t_gate_ps: Duration,
    /// Measured rate on the stop channel, per second.
    pub stop_rate: f64,
    /// Measured rate on the start channel, per second.
    pub start_rate: f64,
}

/// Counts clicks inside the gate. Out-of-gate clicks indicate a wiring
/// error upstream and are rejected.
pub fn count_scaler(clicks: &[TimeStamp], gate: Duration) -> Result<u64> {
    if let Some(bad) = clicks.iter().find(|t| t.0 < 0 || t.0 >= gate.as_ps()) {
        return Err(Error::invalid(format!(
            "click at {} ps outside gate [0, {})",
            bad.0,
            gate.as_ps()
        )));
    }
    Ok(clicks.len() as u64)
}

/// Output of the TAC state machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TacResult {
    pub histogram: Histogram,
    /// Conversions whose difference fell inside the SCA window.
    pub n_coincidence: u64,
    /// Starts that armed the converter.
    pub valid_start_count: u64,
    /// All start pulses offered to the converter.
    pub raw_start_count: u64,
}

/// Runs the sequential TAC state machine.
///
/// `stops` must already carry the physical stop delay line shift. An idle
/// TAC arms on a start (counted as a valid start) and captures the first
/// later stop. If the stop arrives within the histogram range the
/// difference is recorded and the TAC stays busy for the conversion dead
/// time; otherwise the converter times out at the end of the range. Starts
/// during a busy period are ignored.
pub fn tac_process(starts: &[TimeStamp], stops: &[TimeStamp], spec: &TacSpec) -> Result<TacResult> {
    spec.validate()?;
    check_sorted(starts, "starts")?;
    check_sorted(stops, "stops")?;
    let bin = spec.mca_bin_ps;
    let n_bins = (spec.range().as_ps() + bin.as_ps() - 1) / bin.as_ps();
    let extent = Duration(n_bins * bin.as_ps());
    let mut hist = Histogram::new(bin, 0, n_bins as usize);
    let (lo, hi) = spec.sca_window_ps;
    let mut n_coinc = 0u64;
    let mut valid = 0u64;
    let mut busy_until = TimeStamp(i64::MIN);
    let mut j = 0usize;
    for &s in starts {
        if s < busy_until {
            continue;
        }
        valid += 1;
        hist.n_starts_processed += 1;
        while j < stops.len() && stops[j] <= s {
            j += 1;
        }
        if j < stops.len() && stops[j] - s < extent {
            let d = stops[j] - s;
            hist.record(d);
            if d >= lo && d <= hi {
                n_coinc += 1;
            }
            busy_until = stops[j] + spec.conversion_dead_time_ps;
        } else {
            // No stop within range: the conversion times out.
            busy_until = s + extent;
        }
    }
    Ok(TacResult {
        histogram: hist,
        n_coincidence: n_coinc,
        valid_start_count: valid,
        raw_start_count: starts.len() as u64,
    })
}

/// High resolution time interval counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TicSpec {
    /// Quantization of the measured interval.
    #[serde(default = "default_tic_resolution")]
    pub resolution_ps: Duration,
    #[serde(default = "default_tic_bin")]
    pub histogram_bin_ps: Duration,
    /// Number of start-stop couples to measure.
    #[serde(default = "default_tic_pairs")]
    pub n_pairs_target: u64,
    #[serde(default = "default_tic_subsamples")]
    pub n_subsamples: u64,
    /// Histogram extent. Measurements beyond it are still collected, only
    /// the histograms clip.
    pub histogram_range_ps: Duration,
}

fn default_tic_resolution() -> Duration {
    Duration::from_ps(25)
}
fn default_tic_bin() -> Duration {
    Duration::from_ps(100)
}
fn default_tic_pairs() -> u64 {
    10_000
}
fn default_tic_subsamples() -> u64 {
    5
}

impl TicSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution_ps.as_ps() <= 0 {
            return Err(Error::invalid("resolution_ps must be > 0"));
        }
        if self.histogram_bin_ps < self.resolution_ps {
            return Err(Error::invalid(
                "histogram_bin_ps must be >= resolution_ps",
            ));
        }
        if self.n_subsamples == 0 || self.n_pairs_target == 0 {
            return Err(Error::invalid("n_pairs_target and n_subsamples must be > 0"));
        }
        if !self.n_pairs_target.is_multiple_of(self.n_subsamples) {
            return Err(Error::invalid(
                "n_pairs_target must divide evenly into n_subsamples",
            ));
        }
        if self.histogram_range_ps.as_ps() <= 0 {
            return Err(Error::invalid("histogram_range_ps must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicResult {
    /// One histogram per subsample, identical layouts.
    pub subsamples: Vec<Histogram>,
    /// Quantized interval measurements in acquisition order.
    pub measurements: Vec<Duration>,
    /// False when the streams ended before `n_pairs_target` couples.
    pub complete: bool,
}

impl TicResult {
    /// Measurements inside a window, by subsample.
    pub fn window_counts(&self, lo: Duration, hi: Duration) -> Vec<u64> {
        let n_sub = self.subsamples.len().max(1);
        let per = self.measurements.len().div_ceil(n_sub).max(1);
        let mut out = vec![0u64; n_sub];
        for (i, m) in self.measurements.iter().enumerate() {
            if *m >= lo && *m <= hi {
                let idx = (i / per).min(n_sub - 1);
                out[idx] += 1;
            }
        }
        out
    }
}

/// Runs the sequential interval counter until `n_pairs_target` start-stop
/// couples are measured (first stop after each armed start, quantized by
/// flooring to the resolution), split into `n_subsamples` equal batches.
pub fn tic_process(starts: &[TimeStamp], stops: &[TimeStamp], spec: &TicSpec) -> Result<TicResult> {
    spec.validate()?;
    check_sorted(starts, "starts")?;
    check_sorted(stops, "stops")?;
    let mut measurements: Vec<Duration> = Vec::with_capacity(spec.n_pairs_target as usize);
    let mut j = 0usize;
    let mut ready_at = TimeStamp(i64::MIN);
    for &s in starts {
        if measurements.len() as u64 >= spec.n_pairs_target {
            break;
        }
        if s < ready_at {
            continue;
        }
        while j < stops.len() && stops[j] <= s {
            j += 1;
        }
        if j >= stops.len() {
            break;
        }
        let d = stops[j] - s;
        let quantized = Duration((d.as_ps() / spec.resolution_ps.as_ps()) * spec.resolution_ps.as_ps());
        measurements.push(quantized);
        ready_at = stops[j];
    }
    let complete = measurements.len() as u64 == spec.n_pairs_target;
    let per_batch = (spec.n_pairs_target / spec.n_subsamples) as usize;
    let n_bins =
        ((spec.histogram_range_ps.as_ps() + spec.histogram_bin_ps.as_ps() - 1)
            / spec.histogram_bin_ps.as_ps()) as usize;
    let mut subsamples = Vec::with_capacity(spec.n_subsamples as usize);
    for chunk in 0..spec.n_subsamples as usize {
        let mut hist = Histogram::new(spec.histogram_bin_ps, 0, n_bins);
        let lo = chunk * per_batch;
        let hi = ((chunk + 1) * per_batch).min(measurements.len());
        if lo < measurements.len() {
            for m in &measurements[lo..hi] {
                hist.n_starts_processed += 1;
                hist.record(*m);
            }
        }
        subsamples.push(hist);
    }
    Ok(TicResult {
        subsamples,
        measurements,
        complete,
    })
}

/// Counts AND-gate coincidences: pairs with `|tA - tB| <= window / 2`, each
/// click usable at most once, greedy earliest-match (the hardware
/// pulse-overlap behavior for short windows).
pub fn and_gate(clicks_a: &[TimeStamp], clicks_b: &[TimeStamp], window: Duration) -> Result<u64> {
    check_sorted(clicks_a, "clicks_a")?;
    check_sorted(clicks_b, "clicks_b")?;
    if window.is_negative() {
        return Err(Error::invalid("window must be >= 0"));
    }
    let (mut i, mut j, mut n) = (0usize, 0usize, 0u64);
    while i < clicks_a.len() && j < clicks_b.len() {
        let diff = clicks_a[i].0 - clicks_b[j].0;
        // |diff| <= window / 2, kept in integer arithmetic.
        if 2 * diff.abs() <= window.as_ps() {
            n += 1;
            i += 1;
            j += 1;
        } else if diff < 0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    Ok(n)
}

/// Estimates the accidental count inside the SCA window from the flat
/// off-peak region: mean off-peak counts per bin times the number of bins
/// spanned by the window.
pub fn estimate_accidentals(
    hist: &Histogram,
    sca_window: (Duration, Duration),
    off_peak_regions: &[(Duration, Duration)],
) -> Result<f64> {
    let (lo, hi) = sca_window;
    if lo >= hi {
        return Err(Error::invalid("sca window requires lo < hi"));
    }
    let mut off_bins = 0u64;
    let mut off_counts = 0u64;
    for (rlo, rhi) in off_peak_regions {
        if *rhi > lo && *rlo < hi {
            return Err(Error::invalid(
                "off-peak region overlaps the coincidence window",
            ));
        }
        for (idx, &c) in hist.counts.iter().enumerate() {
            let b_lo = hist.bin_start_ps(idx);
            let b_hi = b_lo + hist.bin_width_ps.as_ps();
            if b_lo >= rlo.as_ps() && b_hi <= rhi.as_ps() {
                off_bins += 1;
                off_counts += c;
            }
        }
    }
    if off_bins == 0 {
        return Err(Error::invalid("empty off-peak region"));
    }
    let mean_per_bin = off_counts as f64 / off_bins as f64;
    let window_bins = (hi - lo).as_ps() as f64 / hist.bin_width_ps.as_ps() as f64;
    Ok(mean_per_bin * window_bins)
}

/// Default off-peak selection: everything in the histogram further than
/// `distance_factor` window-widths from the window, split into the two
/// flanking regions.
pub fn default_off_peak_regions(
    hist_range: Duration,
    sca_window: (Duration, Duration),
    distance_factor: f64,
) -> Vec<(Duration, Duration)> {
    let (lo, hi) = sca_window;
    let width = (hi - lo).as_ps() as f64;
    let margin = (distance_factor * width).round() as i64;
    let mut regions = Vec::new();
    let left_end = lo.as_ps() - margin;
    if left_end > 0 {
        regions.push((Duration(0), Duration(left_end)));
    }
    let right_start = hi.as_ps() + margin;
    if right_start < hist_range.as_ps() {
        regions.push((Duration(right_start), hist_range));
    }
    regions
}
