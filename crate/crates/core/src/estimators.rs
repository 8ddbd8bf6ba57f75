//! Calibration estimators and correction factors.
//!
//! Everything here is blind: inputs are counts, rates, histograms, scans,
//! and traces. No function in this module sees photon lineage, pair ids, or
//! any other ground truth.

use serde::{Deserialize, Serialize};

use crate::electronics::CountsSummary;
use crate::error::{Error, Result};
use crate::timebase::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Coincidence,
    ConditionalRotation,
    Analog,
}

/// Correction factors of the corrected coincidence estimator. All are
/// survival fractions in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionFactors {
    /// Probability that no uncorrelated stop pre-empts the true one inside
    /// the TAC delay interval.
    pub alpha: f64,
    /// Fraction of scaler trigger counts that actually armed the converter
    /// (1.0 when N_trigger is the hardware valid-start count itself).
    pub beta: f64,
    /// Live-time fraction of the detector under test.
    pub gamma: f64,
    /// Transmittance of the photon path on the arm under test, measured
    /// externally by usual techniques.
    pub t_signal: f64,
}

impl CorrectionFactors {
    pub const IDEAL: CorrectionFactors = CorrectionFactors {
        alpha: 1.0,
        beta: 1.0,
        gamma: 1.0,
        t_signal: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("t_signal", self.t_signal),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// A method-tagged efficiency estimate with standard uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyEstimate {
    pub value: f64,
    pub std_uncertainty: f64,
    pub method: Method,
}

impl EfficiencyEstimate {
    pub fn new(value: f64, std_uncertainty: f64, method: Method) -> Result<EfficiencyEstimate> {
        // A small overshoot above 1 is allowed for noise; anything further
        // means the calibration inputs are inconsistent.
        if !(0.0..=1.05).contains(&value) {
            return Err(Error::OutOfRegime(format!(
                "efficiency estimate {value:.4} outside [0, 1.05]"
            )));
        }
        let std_uncertainty = std_uncertainty.max(f64::EPSILON);
        Ok(EfficiencyEstimate {
            value,
            std_uncertainty,
            method,
        })
    }
}

/// The uncorrected ratio N_coincidence / N_other_arm.
pub fn eta_raw(n_coincidence: f64, n_other_arm: f64) -> Result<f64> {
    if !(n_other_arm > 0.0) {
        return Err(Error::invalid(format!(
            "other-arm count must be > 0, got {n_other_arm}"
        )));
    }
    Ok(n_coincidence / n_other_arm)
}

/// Survival probability against stop-channel pre-emption: the chance that
/// no uncorrelated stop arrives during the delay interval between the
/// trigger start and its correlated stop.
pub fn correction_alpha(stop_rate_per_s: f64, t_delay: Duration) -> Result<f64> {
    first_order_survival(stop_rate_per_s, t_delay, "alpha")
}

/// First-order live-time fraction of a detector with a fixed
/// non-paralyzable dead time firing at the measured rate.
pub fn correction_gamma(click_rate_per_s: f64, dead_time: Duration) -> Result<f64> {
    first_order_survival(click_rate_per_s, dead_time, "gamma")
}

fn first_order_survival(rate_per_s: f64, span: Duration, name: &str) -> Result<f64> {
    if !(rate_per_s >= 0.0) || span.is_negative() {
        return Err(Error::invalid(format!(
            "{name}: rate and interval must be >= 0"
        )));
    }
    let product = rate_per_s * span.as_secs_f64();
    if product >= 1.0 {
        return Err(Error::OutOfRegime(format!(
            "{name}: rate * interval = {product:.3} >= 1; first-order correction invalid"
        )));
    }
    Ok(1.0 - product)
}

/// Fraction of scaler start counts that armed the converter. Callers use
/// 1.0 when the hardware provides valid-start counting (and N_trigger is
/// the valid-start count itself).
pub fn correction_beta(raw_start_count: u64, valid_start_count: u64) -> Result<f64> {
    if raw_start_count == 0 || valid_start_count == 0 {
        return Err(Error::invalid("start counts must be > 0"));
    }
    if valid_start_count > raw_start_count {
        return Err(Error::invalid(format!(
            "valid starts {valid_start_count} exceed raw starts {raw_start_count}"
        )));
    }
    Ok(valid_start_count as f64 / raw_start_count as f64)
}

/// The corrected coincidence estimator:
///
/// ```text
/// eta = (1 / T_signal) * (N_coincidence - N_accidental)
///                      / (N_trigger - N_background)
///                      / (alpha * gamma * beta)
/// ```
///
/// Every factor is a survival fraction dividing out an independent loss:
/// alpha (stop pre-emption), gamma (DUT dead time), beta (converter busy
/// while the raw scaler keeps counting; 1 with valid-start counting). The
/// standard uncertainty comes from Poisson propagation of all four counts.
pub fn eta_corrected(cs: &CountsSummary, cf: &CorrectionFactors) -> Result<EfficiencyEstimate> {
    cf.validate()?;
    let nc = cs.n_coincidence as f64;
    let na = cs.n_accidental;
    let nt = cs.n_trigger as f64;
    let nb = cs.n_background;
    if na < 0.0 || nb < 0.0 {
        return Err(Error::invalid("estimated counts must be >= 0"));
    }
    let den = nt - nb;
    if !(den > 0.0) {
        return Err(Error::invalid(format!(
            "N_trigger - N_background = {den}; must be > 0"
        )));
    }
    let num = nc - na;
    let value = num / den / (cf.alpha * cf.gamma * cf.beta * cf.t_signal);
    let rel_var = (nc + na) / num.powi(2) + (nt + nb) / den.powi(2);
    let sigma = value.abs() * rel_var.sqrt();
    EfficiencyEstimate::new(value, sigma, Method::Coincidence)
}

/// Closed-form count rate at the detector behind the rotating polarizer in
/// the conditional-rotation scheme:
///
/// ```text
/// W2(theta) = tau_idler * eta2 * W0 / 2 * (1 - eta1 * flip * cos(2 theta))
/// ```
///
/// `w0` is the pair rate at the crystal; collection and idler-path losses
/// fold into `tau_idler`. With `flip_efficiency` = 1 this is the ideal
/// conditional-rotation law.
pub fn predicted_w2(
    theta_deg: f64,
    tau_idler: f64,
    eta2: f64,
    w0: f64,
    eta1: f64,
    flip_efficiency: f64,
) -> f64 {
    let theta = theta_deg.to_radians();
    tau_idler * eta2 * w0 / 2.0 * (1.0 - eta1 * flip_efficiency * (2.0 * theta).cos())
}

/// One angular scan of counts behind the rotating polarizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityScan {
    pub angles_deg: Vec<f64>,
    pub counts: Vec<u64>,
    pub integration_time_ps: Duration,
}

impl VisibilityScan {
    pub fn validate(&self) -> Result<()> {
        if self.angles_deg.len() != self.counts.len() {
            return Err(Error::invalid("angles and counts differ in length"));
        }
        if self.angles_deg.is_empty() {
            return Err(Error::invalid("empty scan"));
        }
        Ok(())
    }
}

fn angular_distance_deg(a: f64, b: f64) -> f64 {
    // The polarizer has a 180 degree period.
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// (max - min) / (max + min) over background-subtracted counts. Requires
/// the scan to cover both extremes (angles within 5 degrees of 0 and 90).
pub fn visibility_minmax(
    scan: &VisibilityScan,
    background: Option<&VisibilityScan>,
) -> Result<f64> {
    scan.validate()?;
    let near = |target: f64| {
        scan.angles_deg
            .iter()
            .any(|&a| angular_distance_deg(a, target) <= 5.0)
    };
    if !near(0.0) || !near(90.0) {
        return Err(Error::invalid(
            "scan must include angles within 5 degrees of 0 and 90",
        ));
    }
    let values = subtract_background(scan, background)?;
    let max = values.iter().cloned().fold(f64::MIN, f64::max);
    let min = values.iter().cloned().fold(f64::MAX, f64::min);
    if !(max + min > 0.0) {
        return Err(Error::invalid("max + min of scan is not positive"));
    }
    Ok((max - min) / (max + min))
}

fn subtract_background(
    scan: &VisibilityScan,
    background: Option<&VisibilityScan>,
) -> Result<Vec<f64>> {
    match background {
        None => Ok(scan.counts.iter().map(|&c| c as f64).collect()),
        Some(bg) => {
            bg.validate()?;
            if bg.angles_deg != scan.angles_deg {
                return Err(Error::invalid("background scan angles differ from scan"));
            }
            Ok(scan
                .counts
                .iter()
                .zip(&bg.counts)
                .map(|(&c, &b)| c as f64 - b as f64)
                .collect())
        }
    }
}

/// Result of the least-squares adjustment of a visibility scan to
/// `W(theta) = A (1 - V cos 2(theta - theta0)) + B`.
///
/// The model is fitted in its linear form `C + P cos 2theta + Q sin 2theta`
/// with `C = A + B`, so the offset `B` is not separately identifiable from
/// the scan alone; it is held fixed (0 after background subtraction, or a
/// known residual level). The covariance is over `(A, V, theta0_deg, B)`
/// with zero rows for the fixed offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsaFit {
    pub amplitude: f64,
    pub visibility: f64,
    pub phase_deg: f64,
    pub offset: f64,
    pub covariance: [[f64; 4]; 4],
    pub chi_square: f64,
    pub dof: u64,
}

impl LsaFit {
    pub fn sigma_visibility(&self) -> f64 {
        self.covariance[1][1].sqrt()
    }

    pub fn sigma_phase_deg(&self) -> f64 {
        self.covariance[2][2].sqrt()
    }

    /// Model value at an angle.
    pub fn predict(&self, theta_deg: f64) -> f64 {
        self.amplitude
            * (1.0
                - self.visibility * (2.0 * (theta_deg - self.phase_deg).to_radians()).cos())
            + self.offset
    }
}

/// Weighted least squares of the visibility model with Poisson weights
/// (variance = observed count, floored at 1) and the offset fixed at 0.
pub fn lsa_fit_visibility(scan: &VisibilityScan) -> Result<LsaFit> {
    scan.validate()?;
    let y: Vec<f64> = scan.counts.iter().map(|&c| c as f64).collect();
    let var: Vec<f64> = y.iter().map(|&v| v.max(1.0)).collect();
    lsa_fit(&scan.angles_deg, &y, &var, 0.0)
}

/// Same fit with a known fixed offset (e.g. an independently measured
/// residual background level).
pub fn lsa_fit_visibility_with_offset(scan: &VisibilityScan, offset: f64) -> Result<LsaFit> {
    scan.validate()?;
    let y: Vec<f64> = scan.counts.iter().map(|&c| c as f64).collect();
    let var: Vec<f64> = y.iter().map(|&v| v.max(1.0)).collect();
    lsa_fit(&scan.angles_deg, &y, &var, offset)
}

/// Core weighted least squares on arbitrary y-values and variances; used
/// directly for background-subtracted scans where the per-point variance is
/// the sum of the scan and background counts.
pub fn lsa_fit(angles_deg: &[f64], y: &[f64], var: &[f64], fixed_offset: f64) -> Result<LsaFit> {
    if angles_deg.len() != y.len() || y.len() != var.len() {
        return Err(Error::invalid("angles, values, variances differ in length"));
    }
    let mut distinct: Vec<f64> = angles_deg.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    if distinct.len() < 5 {
        return Err(Error::DegenerateScan(format!(
            "need >= 5 distinct angles, got {}",
            distinct.len()
        )));
    }

    // Normal equations for y = C + P cos 2t + Q sin 2t.
    let mut ata = [[0.0_f64; 3]; 3];
    let mut atb = [0.0_f64; 3];
    let mut chi_const = 0.0;
    for i in 0..y.len() {
        let w = 1.0 / var[i].max(1.0);
        let t = 2.0 * angles_deg[i].to_radians();
        let x = [1.0, t.cos(), t.sin()];
        for r in 0..3 {
            for c in 0..3 {
                ata[r][c] += w * x[r] * x[c];
            }
            atb[r] += w * x[r] * y[i];
        }
        chi_const += w * y[i] * y[i];
    }
    let (beta, cov) = solve_3x3_with_inverse(ata, atb)?;
    let (c, p, q) = (beta[0], beta[1], beta[2]);

    let mut chi_square = chi_const;
    for r in 0..3 {
        chi_square -= beta[r] * atb[r];
    }
    // Rounding can leave a tiny negative residual on perfect fits.
    let chi_square = chi_square.max(0.0);

    let amplitude = c - fixed_offset;
    if !(amplitude > 0.0) {
        return Err(Error::DegenerateScan(format!(
            "fitted mean level {amplitude} not positive"
        )));
    }
    let r_mod = (p * p + q * q).sqrt();
    let visibility = r_mod / amplitude;
    let phase_deg = if r_mod > 0.0 {
        0.5 * (-q).atan2(-p).to_degrees().rem_euclid(360.0) % 180.0
    } else {
        0.0
    };

    // Delta method: jacobian of (A, V, theta0_deg) wrt (C, P, Q).
    let deg = 180.0 / std::f64::consts::PI;
    let j_a = [1.0, 0.0, 0.0];
    let flat = r_mod <= 1e-9 * amplitude.abs();
    let (j_v, j_t) = if !flat {
        (
            [
                -r_mod / (amplitude * amplitude),
                p / (r_mod * amplitude),
                q / (r_mod * amplitude),
            ],
            [
                0.0,
                -q / (2.0 * r_mod * r_mod) * deg,
                p / (2.0 * r_mod * r_mod) * deg,
            ],
        )
    } else {
        // Flat scan: report the direction-averaged sensitivity and an
        // uninformative phase.
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        (
            [0.0, inv_sqrt2 / amplitude, inv_sqrt2 / amplitude],
            [0.0, 0.0, 0.0],
        )
    };
    let mut covariance = [[0.0_f64; 4]; 4];
    let jac = [j_a, j_v, j_t];
    for r in 0..3 {
        for s in 0..3 {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    acc += jac[r][i] * cov[i][j] * jac[s][j];
                }
            }
            covariance[r][s] = acc;
        }
    }
    if flat {
        covariance[2][2] = 90.0 * 90.0;
    }

    let dof = (y.len() as i64 - 3).max(0) as u64;
    Ok(LsaFit {
        amplitude,
        visibility,
        phase_deg,
        offset: fixed_offset,
        covariance,
        chi_square,
        dof,
    })
}

/// Solves the symmetric 3x3 normal equations and returns the solution with
/// the matrix inverse (the parameter covariance for 1/variance weights).
fn solve_3x3_with_inverse(a: [[f64; 3]; 3], b: [f64; 3]) -> Result<([f64; 3], [[f64; 3]; 3])> {
    // Gauss-Jordan with partial pivoting on the augmented [A | I | b].
    let mut m = [[0.0_f64; 7]; 3];
    for r in 0..3 {
        for c in 0..3 {
            m[r][c] = a[r][c];
        }
        m[r][3 + r] = 1.0;
        m[r][6] = b[r];
    }
    let scale: f64 = (0..3).map(|r| a[r][r].abs()).fold(0.0, f64::max);
    for col in 0..3 {
        let (pivot_row, pivot) = (col..3)
            .map(|r| (r, m[r][col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        if pivot <= 1e-12 * scale.max(1e-300) {
            return Err(Error::DegenerateScan(
                "singular normal equations (angles do not span the model)".into(),
            ));
        }
        m.swap(col, pivot_row);
        let p = m[col][col];
        for c in 0..7 {
            m[col][c] /= p;
        }
        for r in 0..3 {
            if r != col {
                let f = m[r][col];
                for c in 0..7 {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut inv = [[0.0_f64; 3]; 3];
    let mut x = [0.0_f64; 3];
    for r in 0..3 {
        for c in 0..3 {
            inv[r][c] = m[r][3 + c];
        }
        x[r] = m[r][6];
    }
    Ok((x, inv))
}

/// Corrections applied to the fitted visibility in the conditional scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalCorrections {
    /// Combined electrical live fraction of the trigger detector and the
    /// Pockels driver.
    pub pockels_live_fraction: f64,
    pub flip_efficiency: f64,
    /// Transmittance of the polarizer cube in the trigger photon path.
    pub t_signal_polarizer: f64,
}

impl ConditionalCorrections {
    pub const IDEAL: ConditionalCorrections = ConditionalCorrections {
        pockels_live_fraction: 1.0,
        flip_efficiency: 1.0,
        t_signal_polarizer: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pockels_live_fraction", self.pockels_live_fraction),
            ("flip_efficiency", self.flip_efficiency),
            ("t_signal_polarizer", self.t_signal_polarizer),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn product(&self) -> f64 {
        self.pockels_live_fraction * self.flip_efficiency * self.t_signal_polarizer
    }
}

/// The conditional-rotation estimator: fit the background-subtracted scan,
/// divide the visibility by the apparatus corrections.
pub fn eta_conditional(
    scan: &VisibilityScan,
    background: Option<&VisibilityScan>,
    corrections: &ConditionalCorrections,
) -> Result<(EfficiencyEstimate, LsaFit)> {
    corrections.validate()?;
    scan.validate()?;
    let y = subtract_background(scan, background)?;
    // Variance of a difference of Poisson counts.
    let var: Vec<f64> = match background {
        Some(bg) => scan
            .counts
            .iter()
            .zip(&bg.counts)
            .map(|(&c, &b)| (c as f64 + b as f64).max(1.0))
            .collect(),
        None => scan.counts.iter().map(|&c| (c as f64).max(1.0)).collect(),
    };
    let fit = lsa_fit(&scan.angles_deg, &y, &var, 0.0)?;
    let k = corrections.product();
    let estimate = EfficiencyEstimate::new(
        fit.visibility / k,
        fit.sigma_visibility() / k,
        Method::ConditionalRotation,
    )?;
    Ok((estimate, fit))
}

/// The analog-correlation estimator: eta2 = K <i1 i2> / <i1^2> in the
/// low-intensity limit. The uncertainty comes from batched means over ten
/// trace segments.
pub fn eta_analog(trace1: &[f64], trace2: &[f64], k: f64) -> Result<EfficiencyEstimate> {
    if trace1.len() != trace2.len() {
        return Err(Error::invalid("traces differ in length"));
    }
    const N_SEGMENTS: usize = 10;
    if trace1.len() < 2 * N_SEGMENTS {
        return Err(Error::invalid(format!(
            "need at least {} bins for batched uncertainty, got {}",
            2 * N_SEGMENTS,
            trace1.len()
        )));
    }
    if !(k > 0.0) {
        return Err(Error::invalid("gain correction K must be > 0"));
    }
    let n = trace1.len() as f64;
    let cross: f64 = trace1.iter().zip(trace2).map(|(a, b)| a * b).sum::<f64>() / n;
    let auto: f64 = trace1.iter().map(|a| a * a).sum::<f64>() / n;
    if !(auto > 0.0) {
        return Err(Error::invalid("zero autocorrelation on trace 1"));
    }
    let value = k * cross / auto;

    let seg_len = trace1.len() / N_SEGMENTS;
    let mut ratios = Vec::with_capacity(N_SEGMENTS);
    for s in 0..N_SEGMENTS {
        let range = s * seg_len..(s + 1) * seg_len;
        let c: f64 = trace1[range.clone()]
            .iter()
            .zip(&trace2[range.clone()])
            .map(|(a, b)| a * b)
            .sum();
        let a: f64 = trace1[range].iter().map(|x| x * x).sum();
        if a > 0.0 {
            ratios.push(k * c / a);
        }
    }
    if ratios.len() < 2 {
        return Err(Error::invalid("too many empty segments for uncertainty"));
    }
    let m = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / m;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let sigma = (var / m).sqrt();
    EfficiencyEstimate::new(value, sigma, Method::Analog)
}

/// The gain-fluctuation correction of the analog estimator, from
/// calibration samples of the two detectors' single-detection gains:
/// `K = <g1^2> / (<g1> <g2>)`.
pub fn infer_k(gain1_samples: &[f64], gain2_samples: &[f64]) -> Result<f64> {
    if gain1_samples.is_empty() || gain2_samples.is_empty() {
        return Err(Error::invalid("gain samples must be non-empty"));
    }
    let mean1 = gain1_samples.iter().sum::<f64>() / gain1_samples.len() as f64;
    let mean2 = gain2_samples.iter().sum::<f64>() / gain2_samples.len() as f64;
    if !(mean1 > 0.0) || !(mean2 > 0.0) {
        return Err(Error::invalid("mean gain must be > 0"));
    }
    let m2: f64 = gain1_samples.iter().map(|g| g * g).sum::<f64>() / gain1_samples.len() as f64;
    Ok(m2 / (mean1 * mean2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timebase::{poisson_stream, RandomStream};
    use rand::Rng;

    fn poisson_count(mean: f64, stream: &RandomStream) -> u64 {
        // Counting a `mean`-rate Poisson stream over a 1 s gate.
        poisson_stream(mean.max(0.0), Duration::from_secs_f64(1.0), stream)
            .unwrap()
            .len() as u64
    }

    #[test]
    fn eta_raw_examples() {
        assert_eq!(eta_raw(300.0, 300.0).unwrap(), 1.0);
        assert_eq!(eta_raw(150_000.0, 300_000.0).unwrap(), 0.5);
        assert_eq!(eta_raw(0.0, 300.0).unwrap(), 0.0);
        assert!(eta_raw(10.0, 0.0).is_err());
    }

    #[test]
    fn eta_raw_binomial_oracle() {
        // eta_s = 0.5, eta_i = 0.3, N = 1e6 pairs: N_c / N_i -> eta_s.
        let mut rng = RandomStream::new(61).rng();
        let (mut n_c, mut n_i) = (0u64, 0u64);
        for _ in 0..1_000_000 {
            let s = rng.random_bool(0.5);
            let i = rng.random_bool(0.3);
            if i {
                n_i += 1;
                if s {
                    n_c += 1;
                }
            }
        }
        let eta = eta_raw(n_c as f64, n_i as f64).unwrap();
        // Binomial sigma of the conditional fraction.
        let sigma = (0.5 * 0.5 / n_i as f64).sqrt();
        assert!((eta - 0.5).abs() < 5.0 * sigma, "eta {eta}");
    }

    #[test]
    fn correction_factor_formulas() {
        assert_eq!(correction_alpha(0.0, Duration::from_us(1)).unwrap(), 1.0);
        let a = correction_alpha(1e4, Duration::from_us(1)).unwrap();
        assert!((a - 0.99).abs() < 1e-12);
        assert!(correction_alpha(2e6, Duration::from_us(1)).is_err());

        assert_eq!(correction_gamma(1e4, Duration::ZERO).unwrap(), 1.0);
        let g = correction_gamma(1e4, Duration::from_us(1)).unwrap();
        assert!((g - 0.99).abs() < 1e-12);
        assert!(correction_gamma(2e6, Duration::from_us(1)).is_err());
    }

    #[test]
    fn correction_beta_ratio() {
        assert_eq!(correction_beta(1000, 1000).unwrap(), 1.0);
        assert_eq!(correction_beta(1000, 900).unwrap(), 0.9);
        assert!(correction_beta(0, 0).is_err());
        assert!(correction_beta(100, 200).is_err());
    }

    fn summary(nc: u64, nt: u64, na: f64, nb: f64) -> CountsSummary {
        CountsSummary {
            n_trigger: nt,
            n_signal: 0,
            n_coincidence: nc,
            n_accidental: na,
            n_background: nb,
            t_gate_ps: Duration::from_secs_f64(1.0),
            stop_rate: 0.0,
            start_rate: 0.0,
        }
    }

    #[test]
    fn eta_corrected_reduces_to_raw() {
        let cs = summary(300, 1_000, 0.0, 0.0);
        let est = eta_corrected(&cs, &CorrectionFactors::IDEAL).unwrap();
        assert!((est.value - 0.3).abs() < 1e-12);
        assert!(est.std_uncertainty > 0.0);
    }

    #[test]
    fn eta_corrected_divides_out_losses() {
        // Synthetic: truth 0.45, path transmittance 0.9, alpha 0.99,
        // gamma 0.95, beta 0.98 (raw scaler inflated by busy loss),
        // background 10% of triggers, accidentals 2% of coincidences.
        let truth = 0.45_f64;
        let (alpha, gamma, beta, t) = (0.99, 0.95, 0.98, 0.9);
        let n_valid_triggers = 1_000_000_f64;
        let nb = 0.1 * n_valid_triggers;
        let nt = n_valid_triggers / beta + nb;
        // Valid triggers above background produce coincidences.
        let nc_true = truth * t * alpha * gamma * n_valid_triggers;
        let na = 0.02 * nc_true;
        // With N_trigger from the raw scaler, beta rescales the denominator.
        let beta_measured = (nt - nb) * beta / (nt - nb); // = beta
        let cs = summary((nc_true + na).round() as u64, nt.round() as u64, na, nb);
        let cf = CorrectionFactors {
            alpha,
            beta: beta_measured,
            gamma,
            t_signal: t,
        };
        let est = eta_corrected(&cs, &cf).unwrap();
        assert!(
            (est.value - truth).abs() < 1e-3,
            "corrected {} vs truth {truth}",
            est.value
        );
    }

    #[test]
    fn eta_corrected_rejects_bad_inputs() {
        let cs = summary(10, 5, 0.0, 10.0);
        assert!(eta_corrected(&cs, &CorrectionFactors::IDEAL).is_err());
        let cs = summary(10, 100, 0.0, 0.0);
        let bad = CorrectionFactors {
            alpha: 0.0,
            beta: 1.0,
            gamma: 1.0,
            t_signal: 1.0,
        };
        assert!(eta_corrected(&cs, &bad).is_err());
    }

    /// Brute-force enumeration over the pair/detection branches of the
    /// conditional-rotation scheme.
    fn w2_case_analysis(theta_deg: f64, eta1: f64, flip: f64) -> f64 {
        let t = theta_deg.to_radians();
        let (s2, c2) = (t.sin().powi(2), t.cos().powi(2));
        // Idler H (signal V, triggerable) with probability 1/2; idler V
        // (signal H, never triggers) with probability 1/2.
        0.5 * (eta1 * (flip * s2 + (1.0 - flip) * c2) + (1.0 - eta1) * c2) + 0.5 * s2
    }

    #[test]
    fn predicted_w2_matches_case_enumeration() {
        for &eta1 in &[0.0, 0.25, 0.5, 0.75, 1.0] {
            for &flip in &[0.5, 0.8, 1.0] {
                for k in 0..=36 {
                    let theta = k as f64 * 5.0;
                    let lhs = predicted_w2(theta, 0.6, 0.4, 1e5, eta1, flip);
                    let rhs = 0.6 * 0.4 * 1e5 * w2_case_analysis(theta, eta1, flip);
                    assert!(
                        (lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0),
                        "theta {theta} eta1 {eta1} flip {flip}: {lhs} vs {rhs}"
                    );
                }
            }
        }
    }

    #[test]
    fn predicted_w2_endpoints() {
        // theta = 45: cos 90 = 0, rate independent of eta1.
        let a = predicted_w2(45.0, 0.5, 0.4, 1e5, 0.1, 1.0);
        let b = predicted_w2(45.0, 0.5, 0.4, 1e5, 0.9, 1.0);
        assert!((a - b).abs() < 1e-9);
        // theta = 0, eta1 = 1, flip = 1: perfect anticorrelation minimum.
        assert!(predicted_w2(0.0, 0.5, 0.4, 1e5, 1.0, 1.0).abs() < 1e-9);
    }

    fn scan_from_model(
        eta1: f64,
        flip: f64,
        mean_peak: f64,
        noise_stream: Option<&RandomStream>,
    ) -> VisibilityScan {
        let angles: Vec<f64> = (0..19).map(|k| k as f64 * 10.0).collect();
        let counts: Vec<u64> = angles
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let mean = mean_peak / 2.0 * (1.0 - eta1 * flip * (2.0 * a.to_radians()).cos());
                match noise_stream {
                    Some(s) => poisson_count(mean, &s.substream(i as u64)),
                    None => mean.round() as u64,
                }
            })
            .collect();
        VisibilityScan {
            angles_deg: angles,
            counts,
            integration_time_ps: Duration::from_secs_f64(10.0),
        }
    }

    #[test]
    fn visibility_minmax_examples() {
        let flat = VisibilityScan {
            angles_deg: (0..19).map(|k| k as f64 * 10.0).collect(),
            counts: vec![500; 19],
            integration_time_ps: Duration::from_secs_f64(10.0),
        };
        assert_eq!(visibility_minmax(&flat, None).unwrap(), 0.0);

        let mut perfect = flat.clone();
        perfect.counts = perfect
            .angles_deg
            .iter()
            .map(|&a| (500.0 * (1.0 - (2.0 * a.to_radians()).cos())).round() as u64)
            .collect();
        assert_eq!(visibility_minmax(&perfect, None).unwrap(), 1.0);

        // Noiseless law samples at eta1 = 0.5: V = eta1.
        let scan = scan_from_model(0.5, 1.0, 20_000.0, None);
        let v = visibility_minmax(&scan, None).unwrap();
        assert!((v - 0.5).abs() < 1e-3, "v {v}");
    }

    #[test]
    fn visibility_minmax_requires_extremes() {
        let scan = VisibilityScan {
            angles_deg: vec![20.0, 30.0, 40.0, 50.0, 60.0],
            counts: vec![1; 5],
            integration_time_ps: Duration::from_secs_f64(1.0),
        };
        assert!(visibility_minmax(&scan, None).is_err());
    }

    #[test]
    fn lsa_recovers_noiseless_model() {
        // Exact samples, theta0 = 0, B = 0: parameters to relative 1e-6.
        let angles: Vec<f64> = (0..19).map(|k| k as f64 * 10.0).collect();
        let y: Vec<f64> = angles
            .iter()
            .map(|&a| 1000.0 * (1.0 - 0.47 * (2.0 * a.to_radians()).cos()))
            .collect();
        let var = vec![1.0; 19];
        let fit = lsa_fit(&angles, &y, &var, 0.0).unwrap();
        assert!((fit.amplitude - 1000.0).abs() / 1000.0 < 1e-6);
        assert!((fit.visibility - 0.47).abs() / 0.47 < 1e-6);
        assert!(fit.phase_deg.min(180.0 - fit.phase_deg) < 1e-6);
        assert!(fit.chi_square < 1e-6);
        // Count-rounded inputs stay close.
        let scan = scan_from_model(0.47, 1.0, 2_000_000.0, None);
        let fit = lsa_fit_visibility(&scan).unwrap();
        assert!((fit.visibility - 0.47).abs() < 2e-4, "V {}", fit.visibility);
    }

    #[test]
    fn lsa_poisson_noise_recovers_visibility() {
        // eta1 = 0.486, 19 angles: V within 3 sigma, sigma_V of order 0.01.
        let stream = RandomStream::new(71);
        let scan = scan_from_model(0.486, 1.0, 2.0 * 1070.0, Some(&stream));
        let fit = lsa_fit_visibility(&scan).unwrap();
        let sigma = fit.sigma_visibility();
        assert!(
            (fit.visibility - 0.486).abs() < 3.0 * sigma,
            "V {} sigma {sigma}",
            fit.visibility
        );
        assert!(sigma > 0.003 && sigma < 0.05, "sigma_V {sigma}");
    }

    #[test]
    fn lsa_offset_shift_changes_only_offset() {
        // Adding a constant to all counts changes B only; V * A invariant.
        let stream = RandomStream::new(72);
        let scan = scan_from_model(0.4, 1.0, 2.0 * 5_000.0, Some(&stream));
        let fit0 = lsa_fit_visibility(&scan).unwrap();
        let shift = 750u64;
        let shifted = VisibilityScan {
            angles_deg: scan.angles_deg.clone(),
            counts: scan.counts.iter().map(|&c| c + shift).collect(),
            integration_time_ps: scan.integration_time_ps,
        };
        let fit1 = lsa_fit_visibility_with_offset(&shifted, shift as f64).unwrap();
        assert_eq!(fit1.offset, shift as f64);
        assert!(
            (fit1.amplitude - fit0.amplitude).abs() / fit0.amplitude < 2e-3,
            "A {} vs {}",
            fit1.amplitude,
            fit0.amplitude
        );
        assert!((fit1.visibility - fit0.visibility).abs() < 2e-3);
        // The modulation amplitude V * A is invariant even when the fitter
        // is not told about the shift.
        let fit2 = lsa_fit_visibility(&shifted).unwrap();
        let va0 = fit0.visibility * fit0.amplitude;
        let va2 = fit2.visibility * fit2.amplitude;
        assert!((va0 - va2).abs() / va0 < 0.02, "VA {va0} vs {va2}");
    }

    #[test]
    fn lsa_rejects_degenerate_scans() {
        let angles = vec![0.0, 10.0, 20.0, 30.0];
        let y = vec![1.0; 4];
        let var = vec![1.0; 4];
        assert!(matches!(
            lsa_fit(&angles, &y, &var, 0.0),
            Err(Error::DegenerateScan(_))
        ));
        // Five angles collapsing to two distinct values are singular too.
        let angles = vec![0.0, 0.0, 0.0, 90.0, 90.0];
        assert!(lsa_fit(&angles, &[1.0; 5], &[1.0; 5], 0.0).is_err());
    }

    #[test]
    fn lsa_covariance_is_symmetric_psd() {
        let stream = RandomStream::new(73);
        let scan = scan_from_model(0.3, 1.0, 2.0 * 2_000.0, Some(&stream));
        let fit = lsa_fit_visibility(&scan).unwrap();
        let c = &fit.covariance;
        for r in 0..4 {
            for s in 0..4 {
                assert!((c[r][s] - c[s][r]).abs() < 1e-12);
            }
            assert!(c[r][r] >= 0.0);
        }
    }

    #[test]
    fn eta_conditional_divides_corrections() {
        // flip 0.9 and true eta1 0.5: raw visibility ~ 0.45, corrected ~ 0.5.
        let stream = RandomStream::new(74);
        let scan = scan_from_model(0.5, 0.9, 2.0 * 20_000.0, Some(&stream));
        let raw_fit = lsa_fit_visibility(&scan).unwrap();
        assert!((raw_fit.visibility - 0.45).abs() < 3.0 * raw_fit.sigma_visibility());
        let corr = ConditionalCorrections {
            pockels_live_fraction: 1.0,
            flip_efficiency: 0.9,
            t_signal_polarizer: 1.0,
        };
        let (est, _) = eta_conditional(&scan, None, &corr).unwrap();
        assert!(
            (est.value - 0.5).abs() < 3.0 * est.std_uncertainty,
            "corrected {} +- {}",
            est.value,
            est.std_uncertainty
        );
    }

    #[test]
    fn eta_conditional_ideal_is_fit_visibility() {
        let scan = scan_from_model(0.4, 1.0, 2.0 * 10_000.0, None);
        let (est, fit) = eta_conditional(&scan, None, &ConditionalCorrections::IDEAL).unwrap();
        assert_eq!(est.value, fit.visibility);
    }

    #[test]
    fn eta_analog_self_and_independent() {
        let stream = RandomStream::new(75);
        let mut rng = stream.rng();
        let trace: Vec<f64> = (0..10_000)
            .map(|_| if rng.random_bool(0.05) { 1.0 } else { 0.0 })
            .collect();
        let est = eta_analog(&trace, &trace, 1.0).unwrap();
        assert_eq!(est.value, 1.0);

        // Independent traces: value ~ 0 within 5 sigma.
        let t1: Vec<f64> = (0..200_000)
            .map(|_| if rng.random_bool(0.01) { 1.0 } else { 0.0 })
            .collect();
        let t2: Vec<f64> = (0..200_000)
            .map(|_| if rng.random_bool(0.01) { 1.0 } else { 0.0 })
            .collect();
        let est = eta_analog(&t1, &t2, 1.0).unwrap();
        assert!(
            est.value < 5.0 * est.std_uncertainty.max(0.005),
            "value {} sigma {}",
            est.value,
            est.std_uncertainty
        );
    }

    #[test]
    fn eta_analog_recovers_pair_efficiency() {
        // Compound construction: pairs per bin ~ Poisson(0.01), detector 1
        // thins at eta1, detector 2 at eta2 = 0.3, deterministic equal
        // gains: K = 1 recovers eta2.
        let stream = RandomStream::new(76);
        let mut rng = stream.rng();
        let (eta1, eta2) = (0.45, 0.30);
        let lambda = 0.01_f64; // pair_rate * bin_width
        let n_bins = 400_000;
        let mut t1 = Vec::with_capacity(n_bins);
        let mut t2 = Vec::with_capacity(n_bins);
        let p0 = (-lambda).exp();
        let p1 = p0 * (1.0 + lambda);
        for _ in 0..n_bins {
            let u: f64 = rng.random();
            let n = if u < p0 {
                0
            } else if u < p1 {
                1
            } else {
                2
            };
            let (mut c1, mut c2) = (0.0, 0.0);
            for _ in 0..n {
                if rng.random_bool(eta1) {
                    c1 += 1.0;
                }
                if rng.random_bool(eta2) {
                    c2 += 1.0;
                }
            }
            t1.push(c1);
            t2.push(c2);
        }
        let est = eta_analog(&t1, &t2, 1.0).unwrap();
        assert!(
            (est.value - eta2).abs() < 3.0 * est.std_uncertainty,
            "value {} +- {} vs {eta2}",
            est.value,
            est.std_uncertainty
        );
    }

    #[test]
    fn infer_k_examples() {
        assert_eq!(infer_k(&[2.0, 2.0, 2.0], &[2.0, 2.0]).unwrap(), 1.0);
        // rel-std 0.5 around mean 1: <g^2> = <g>^2 (1 + rel_std^2) = 1.25;
        // equal means: K = 1.25.
        let stream = RandomStream::new(77);
        let mut rng = stream.rng();
        let normal = rand_distr::Normal::new(1.0_f64, 0.5).unwrap();
        let g1: Vec<f64> = (0..2_000_000)
            .map(|_| rand_distr::Distribution::sample(&normal, &mut rng))
            .collect();
        let g2 = vec![1.0; 100];
        let k = infer_k(&g1, &g2).unwrap();
        assert!((k - 1.25).abs() < 5e-3, "K {k}");
        assert!(infer_k(&[], &[1.0]).is_err());
        assert!(infer_k(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn infer_k_debiases_gain_fluctuations() {
        // Gain-fluctuated traces: plugging the inferred K into eta_analog
        // removes the bias that K = 1 leaves in place.
        let stream = RandomStream::new(78);
        let mut rng = stream.rng();
        let normal1 = rand_distr::Normal::new(1.0_f64, 0.4).unwrap();
        let normal2 = rand_distr::Normal::new(0.8_f64, 0.2).unwrap();
        let (eta1, eta2) = (0.5, 0.3);
        let lambda = 0.02_f64;
        let n_bins = 400_000;
        let mut t1 = Vec::with_capacity(n_bins);
        let mut t2 = Vec::with_capacity(n_bins);
        let p0 = (-lambda).exp();
        for _ in 0..n_bins {
            let u: f64 = rng.random();
            let n = u32::from(u >= p0);
            let (mut c1, mut c2) = (0.0, 0.0);
            for _ in 0..n {
                if rng.random_bool(eta1) {
                    let g: f64 = rand_distr::Distribution::sample(&normal1, &mut rng);
                    c1 += g.max(0.0);
                }
                if rng.random_bool(eta2) {
                    let g: f64 = rand_distr::Distribution::sample(&normal2, &mut rng);
                    c2 += g.max(0.0);
                }
            }
            t1.push(c1);
            t2.push(c2);
        }
        let mut cal1 = Vec::new();
        let mut cal2 = Vec::new();
        for _ in 0..200_000 {
            cal1.push(rand_distr::Distribution::sample(&normal1, &mut rng).max(0.0));
            cal2.push(rand_distr::Distribution::sample(&normal2, &mut rng).max(0.0));
        }
        let k = infer_k(&cal1, &cal2).unwrap();
        let est = eta_analog(&t1, &t2, k).unwrap();
        assert!(
            (est.value - eta2).abs() < 3.0 * est.std_uncertainty,
            "debiased {} +- {} vs {eta2} (K {k})",
            est.value,
            est.std_uncertainty
        );
        // Without the correction the estimate is visibly biased.
        let biased = eta_analog(&t1, &t2, 1.0).unwrap();
        assert!((biased.value - eta2).abs() > 3.0 * biased.std_uncertainty);
    }
}
