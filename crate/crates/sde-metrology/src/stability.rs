//! Source-stability analysis via the overlapping Allan deviation of
//! fractional power.

use serde::Serialize;

#[derive(Debug, Clone, thiserror::Error)]
pub enum StabilityError {
    #[error("invalid series: {0}")]
    BadSeries(String),
    #[error("invalid tau {tau_s} s: {reason}")]
    InvalidTau { tau_s: f64, reason: String },
}

/// Uniformly sampled power readings.
#[derive(Clone, Debug)]
pub struct StabilitySeries {
    readings_w: Vec<f64>,
    sample_rate_hz: f64,
}

impl StabilitySeries {
    pub fn new(readings_w: Vec<f64>, sample_rate_hz: f64) -> Result<Self, StabilityError> {
        if readings_w.len() < 2 {
            return Err(StabilityError::BadSeries(format!(
                "need at least 2 samples, got {}",
                readings_w.len()
            )));
        }
        if !(sample_rate_hz > 0.0) {
            return Err(StabilityError::BadSeries(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if readings_w.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(StabilityError::BadSeries(
                "readings must be finite and positive".into(),
            ));
        }
        Ok(StabilitySeries {
            readings_w,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.readings_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings_w.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn readings_w(&self) -> &[f64] {
        &self.readings_w
    }

    pub fn span_s(&self) -> f64 {
        self.readings_w.len() as f64 / self.sample_rate_hz
    }
}

/// One Allan-deviation estimate.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AdevPoint {
    /// Realized averaging time m / fs (the requested tau rounded to an
    /// integer number of samples).
    pub tau_s: f64,
    pub samples_per_bin: usize,
    pub adev: f64,
}

/// Overlapping Allan deviation of fractional power y_i = r_i / mean - 1 at
/// the requested averaging times. Each tau must be at least two sample
/// periods and at most a third of the series span.
pub fn allan_deviation(
    series: &StabilitySeries,
    taus: &[f64],
) -> Result<Vec<AdevPoint>, StabilityError> {
    let n = series.len();
    let fs = series.sample_rate_hz();
    let mean = crate::stats::mean(series.readings_w());
    let y: Vec<f64> = series.readings_w().iter().map(|r| r / mean - 1.0).collect();
    // Prefix sums: S[k] = sum of y[0..k].
    let mut s = Vec::with_capacity(n + 1);
    s.push(0.0);
    for v in &y {
        s.push(s.last().unwrap() + v);
    }

    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        if !(tau > 0.0) || tau < 2.0 / fs - 1e-12 {
            return Err(StabilityError::InvalidTau {
                tau_s: tau,
                reason: format!("must be at least 2 sample periods ({} s)", 2.0 / fs),
            });
        }
        if tau > series.span_s() / 3.0 + 1e-12 {
            return Err(StabilityError::InvalidTau {
                tau_s: tau,
                reason: format!("must be at most a third of the span ({} s)", series.span_s() / 3.0),
            });
        }
        let m = (tau * fs).round() as usize;
        let m = m.max(2);
        if 2 * m >= n {
            return Err(StabilityError::InvalidTau {
                tau_s: tau,
                reason: "series too short for this averaging time".into(),
            });
        }
        let mut acc = 0.0;
        for j in 0..=(n - 2 * m) {
            let d = s[j + 2 * m] - 2.0 * s[j + m] + s[j];
            acc += d * d;
        }
        let avar = acc / (2.0 * (m as f64) * (m as f64) * (n - 2 * m + 1) as f64);
        out.push(AdevPoint {
            tau_s: m as f64 / fs,
            samples_per_bin: m,
            adev: avar.sqrt(),
        });
    }
    Ok(out)
}

/// Octave-spaced averaging times admissible for the series length.
pub fn default_taus(series: &StabilitySeries) -> Vec<f64> {
    let fs = series.sample_rate_hz();
    let n = series.len();
    let mut taus = Vec::new();
    let mut m = 2usize;
    while m <= n / 3 && 2 * m < n {
        taus.push(m as f64 / fs);
        m *= 2;
    }
    taus
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::Distribution;

    #[test]
    fn constant_series_has_zero_deviation() {
        let series = StabilitySeries::new(vec![1e-4; 1000], 4.118).unwrap();
        let taus = default_taus(&series);
        assert!(!taus.is_empty());
        for p in allan_deviation(&series, &taus).unwrap() {
            assert_eq!(p.adev, 0.0);
        }
    }

    #[test]
    fn white_noise_falls_as_inverse_sqrt_tau() {
        // For uncorrelated fractional noise of std s, ADEV(m) = s / sqrt(m).
        let fs = 4.118;
        let s = 1e-3;
        let normal = rand_distr::Normal::new(0.0, s).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let readings: Vec<f64> = (0..40_000)
            .map(|_| 1e-4 * (1.0 + normal.sample(&mut rng)))
            .collect();
        let series = StabilitySeries::new(readings, fs).unwrap();
        let points = allan_deviation(&series, &[2.0 / fs, 4.0 / fs, 16.0 / fs]).unwrap();
        for p in &points {
            let expect = s / (p.samples_per_bin as f64).sqrt();
            assert!(
                ((p.adev - expect) / expect).abs() < 0.05,
                "m={} adev={} expect={}",
                p.samples_per_bin,
                p.adev,
                expect
            );
        }
        // Log-log slope across a decade.
        let lo = &points[0];
        let hi = &points[2];
        let slope = (hi.adev.ln() - lo.adev.ln()) / (hi.tau_s.ln() - lo.tau_s.ln());
        assert!((slope + 0.5).abs() < 0.05, "slope {slope}");
    }

    #[test]
    fn tau_bounds_are_enforced() {
        let series = StabilitySeries::new(vec![1e-4; 100], 4.118).unwrap();
        assert!(matches!(
            allan_deviation(&series, &[0.1]),
            Err(StabilityError::InvalidTau { .. })
        ));
        assert!(matches!(
            allan_deviation(&series, &[series.span_s()]),
            Err(StabilityError::InvalidTau { .. })
        ));
    }

    #[test]
    fn concatenation_is_stationary_for_short_taus() {
        let fs = 4.118;
        let normal = rand_distr::Normal::new(0.0, 1e-3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let half: Vec<f64> = (0..20_000)
            .map(|_| 1e-4 * (1.0 + normal.sample(&mut rng)))
            .collect();
        let mut double = half.clone();
        double.extend_from_slice(&half);
        let s1 = StabilitySeries::new(half, fs).unwrap();
        let s2 = StabilitySeries::new(double, fs).unwrap();
        for m in [2usize, 8, 32] {
            let tau = m as f64 / fs;
            let a1 = allan_deviation(&s1, &[tau]).unwrap()[0].adev;
            let a2 = allan_deviation(&s2, &[tau]).unwrap()[0].adev;
            assert!(((a1 - a2) / a1).abs() < 0.05, "m={m}: {a1} vs {a2}");
        }
    }
}
