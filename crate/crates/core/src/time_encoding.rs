//! Harmonic time encoding and the translation-invariant temporal kernel it induces.
//!
//! A timestamp `t` maps to `c·[cos(ω₁t), sin(ω₁t), …, cos(ω_m t), sin(ω_m t)]` with
//! `c = sqrt(2 / d_time)` and `d_time = 2m`, so `Φ(t)·Φ(t) = 1` and
//! `Φ(t₁)·Φ(t₂) = (2/d_time) Σ_k cos(ω_k (t₁ − t₂))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the time vector of an information vector is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeMode {
    /// Harmonic encoding with trained frequencies.
    #[default]
    Learned,
    /// Harmonic encoding with frequencies frozen at initialization.
    Fixed,
    /// Learned lookup table indexed by recency rank in the node's history.
    Position,
    /// All-zero time vectors.
    Empty,
}

impl TimeMode {
    pub fn uses_frequencies(self) -> bool {
        matches!(self, TimeMode::Learned | TimeMode::Fixed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEncoder {
    pub omega: Vec<f64>,
    pub trainable: bool,
}

impl TimeEncoder {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.is_empty() {
            return Err(Error::InvalidConfig("time encoder needs at least one frequency".into()));
        }
        if omega.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidConfig("time frequencies must be finite".into()));
        }
        Ok(TimeEncoder {
            omega,
            trainable: true,
        })
    }

    /// Geometric frequency ladder for an encoder of output dimension `d_time`.
    pub fn with_dimension(d_time: usize, max_frequency: f64) -> Result<Self> {
        if d_time == 0 || d_time % 2 != 0 {
            return Err(Error::InvalidConfig(format!("d_time must be even and positive, got {d_time}")));
        }
        TimeEncoder::new(init_frequencies(d_time / 2, max_frequency))
    }

    pub fn d_time(&self) -> usize {
        2 * self.omega.len()
    }

    pub fn encode(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.d_time()];
        encode_into(&self.omega, t, &mut out);
        out
    }

    pub fn kernel(&self, t1: f64, t2: f64) -> f64 {
        crate::tensor::dot(&self.encode(t1), &self.encode(t2))
    }

    /// Closed form of [`TimeEncoder::kernel`]: `(2/d_time) Σ_k cos(ω_k (t₁ − t₂))`.
    pub fn kernel_closed_form(&self, t1: f64, t2: f64) -> f64 {
        let dt = t1 - t2;
        self.omega.iter().map(|w| (w * dt).cos()).sum::<f64>() / self.omega.len() as f64
    }

    /// `∂Φ(t)/∂ω_k` for every k: the pair of non-zero entries (cos slot, sin slot).
    pub fn encode_omega_jacobian(&self, t: f64) -> Vec<[f64; 2]> {
        let c = scale(self.d_time());
        self.omega
            .iter()
            .map(|w| {
                let (s, co) = (w * t).sin_cos();
                [-c * t * s, c * t * co]
            })
            .collect()
    }
}

#[inline]
pub fn scale(d_time: usize) -> f64 {
    (2.0 / d_time as f64).sqrt()
}

/// Writes `Φ(t)` for frequencies `omega` into `out` (length `2·omega.len()`).
pub fn encode_into(omega: &[f64], t: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 2 * omega.len());
    let c = scale(out.len());
    for (k, w) in omega.iter().enumerate() {
        let (s, co) = (w * t).sin_cos();
        out[2 * k] = c * co;
        out[2 * k + 1] = c * s;
    }
}

/// `m` frequencies decreasing geometrically from `max_frequency` to 1.
pub fn init_frequencies(m: usize, max_frequency: f64) -> Vec<f64> {
    if m == 1 {
        return vec![1.0];
    }
    let alpha = max_frequency.max(1.0).log10() / (m - 1) as f64;
    (0..m)
        .map(|k| max_frequency.max(1.0) / 10f64.powf(k as f64 * alpha))
        .collect()
}

/// Affine map from raw seconds to model time, `[min, max] → [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeNormalizer {
    pub offset: f64,
    pub span: f64,
}

impl Default for TimeNormalizer {
    fn default() -> Self {
        TimeNormalizer {
            offset: 0.0,
            span: 1.0,
        }
    }
}

impl TimeNormalizer {
    pub fn fit(timestamps: impl IntoIterator<Item = f64>) -> Self {
        let (lo, hi) = timestamps
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| (lo.min(t), hi.max(t)));
        if !lo.is_finite() {
            return TimeNormalizer::default();
        }
        let span = hi - lo;
        TimeNormalizer {
            offset: lo,
            span: if span > 0.0 { span } else { 1.0 },
        }
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        (raw - self.offset) / self.span
    }

    pub fn denormalize(&self, t: f64) -> f64 {
        t * self.span + self.offset
    }

    /// A raw duration in seconds expressed in model time units.
    pub fn duration(&self, seconds: f64) -> f64 {
        seconds / self.span
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn zero_frequency() {
        let enc = TimeEncoder::new(vec![0.0]).unwrap();
        assert_eq!(enc.encode(123.4), vec![1.0, 0.0]);
    }

    #[test]
    fn half_turn() {
        let enc = TimeEncoder::new(vec![PI]).unwrap();
        let v = enc.encode(1.0);
        assert!((v[0] + 1.0).abs() < 1e-15 && v[1].abs() < 1e-15);
        assert!((enc.kernel(1.0, 0.0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn time_zero() {
        let enc = TimeEncoder::new(vec![1.0, 2.0]).unwrap();
        let h = 0.5f64.sqrt();
        let v = enc.encode(0.0);
        for (a, b) in v.iter().zip([h, 0.0, h, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn kernel_at_zero_lag_is_one() {
        let enc = TimeEncoder::new(vec![0.3, 7.0, 120.0]).unwrap();
        for &t in &[0.0, 0.25, 0.99, 13.0] {
            assert!((enc.kernel(t, t) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kernel_two_frequencies() {
        let enc = TimeEncoder::new(vec![0.5, 1.5]).unwrap();
        // direct evaluation: mean of cos(0.5·4) and cos(1.5·4)
        let oracle = (2.0f64.cos() + 6.0f64.cos()) / 2.0;
        assert!((enc.kernel(7.0, 3.0) - oracle).abs() < 1e-12);
        assert!((enc.kernel(7.0, 3.0) - 0.2720117250516117).abs() < 1e-9);
    }

    #[test]
    fn dimension_must_be_even() {
        assert!(TimeEncoder::with_dimension(3, 10.0).is_err());
        assert!(TimeEncoder::with_dimension(0, 10.0).is_err());
        assert_eq!(TimeEncoder::with_dimension(8, 10.0).unwrap().d_time(), 8);
        assert!(TimeEncoder::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn frequency_ladder_spans_requested_range() {
        let w = init_frequencies(4, 1000.0);
        let want = [1000.0, 100.0, 10.0, 1.0];
        for (a, b) in w.iter().zip(want) {
            assert!((a - b).abs() < 1e-9 * b);
        }
    }

    #[test]
    fn normalizer_maps_span_to_unit_interval() {
        let n = TimeNormalizer::fit([100.0, 400.0, 250.0]);
        assert_eq!(n.normalize(100.0), 0.0);
        assert_eq!(n.normalize(400.0), 1.0);
        assert_eq!(n.denormalize(0.5), 250.0);
        assert_eq!(TimeNormalizer::fit([5.0]).span, 1.0);
    }

    proptest! {
        #[test]
        fn kernel_properties(
            omega in prop::collection::vec(-50.0f64..50.0, 1..8),
            t1 in 0.0f64..1.0, t2 in 0.0f64..1.0, shift in -1.0f64..1.0,
        ) {
            let enc = TimeEncoder::new(omega).unwrap();
            let k = enc.kernel(t1, t2);
            prop_assert!((k - enc.kernel_closed_form(t1, t2)).abs() < 1e-9);
            prop_assert!((k - enc.kernel(t1 + shift, t2 + shift)).abs() < 1e-9);
            prop_assert_eq!(k, enc.kernel(t2, t1));
            prop_assert!(k.abs() <= 1.0 + 1e-12);
            let n: f64 = enc.encode(t1).iter().map(|v| v * v).sum();
            prop_assert!(n <= 1.0 + 1e-12);
        }

        #[test]
        fn omega_jacobian_matches_central_differences(
            omega in prop::collection::vec(0.1f64..30.0, 1..6),
            t in 0.0f64..1.0,
        ) {
            let enc = TimeEncoder::new(omega.clone()).unwrap();
            let jac = enc.encode_omega_jacobian(t);
            let h = 1e-6;
            for k in 0..omega.len() {
                let mut plus = omega.clone();
                let mut minus = omega.clone();
                plus[k] += h;
                minus[k] -= h;
                let p = TimeEncoder::new(plus).unwrap().encode(t);
                let m = TimeEncoder::new(minus).unwrap().encode(t);
                for slot in 0..2 {
                    let fd = (p[2 * k + slot] - m[2 * k + slot]) / (2.0 * h);
                    let an = jac[k][slot];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                    prop_assert!(rel < 1e-4, "k={} slot={} fd={} an={}", k, slot, fd, an);
                }
            }
        }
    }
}
