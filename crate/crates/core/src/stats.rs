//! Moment estimators and the Jarque-Bera normality test.
//!
//! Central moments are accumulated in a single pass with the pairwise update
//! of Pébay (2008), so partial results from different shards merge exactly.
//! Estimators use the population (bias-uncorrected) form.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{MeasurementRecord, Quadrature};
use crate::rng::SHARD_SIZE;

/// 95% quantile of the chi-square distribution with two degrees of freedom,
/// `−2 ln 0.05` (tabulated as 5.9915).
pub const CHI2_2DOF_95: f64 = 5.991_464_547_107_979;

/// Quantile of the two-degree-of-freedom chi-square distribution, which is
/// exponential with mean 2.
pub fn chi2_2dof_quantile(confidence: f64) -> f64 {
    -2.0 * (1.0 - confidence).ln()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(samples: &[f64]) -> Self {
        samples
            .par_chunks(SHARD_SIZE)
            .map(|c| {
                let mut m = Moments::new();
                c.iter().for_each(|&x| m.push(x));
                m
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(Moments::new(), |a, b| a.merge(&b))
    }

    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let d = other.mean - self.mean;
        let d2 = d * d;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + other.m3
            + d2 * d * na * nb * (na - nb) / (n * n)
            + 3.0 * d * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * d * (na * other.m3 - nb * self.m3) / n;
        Moments {
            n: self.n + other.n,
            mean: self.mean + d * nb / n,
            m2,
            m3,
            m4,
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.m2 / self.n as f64
    }

    pub fn skewness(&self) -> f64 {
        let n = self.n as f64;
        n.sqrt() * self.m3 / self.m2.powf(1.5)
    }

    pub fn excess_kurtosis(&self) -> f64 {
        let n = self.n as f64;
        n * self.m4 / (self.m2 * self.m2) - 3.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSummary {
    pub n: usize,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub se_skewness: f64,
    pub se_kurtosis: f64,
}

fn summarize(m: &Moments, min_n: usize) -> Result<MomentSummary> {
    let n = m.count() as usize;
    if n < min_n {
        return Err(Error::InsufficientShots(format!(
            "{n} samples, need at least {min_n}"
        )));
    }
    if !(m.variance() > 0.0) {
        return Err(Error::Degenerate("samples have zero variance".into()));
    }
    Ok(MomentSummary {
        n,
        skewness: m.skewness(),
        excess_kurtosis: m.excess_kurtosis(),
        se_skewness: (6.0 / n as f64).sqrt(),
        se_kurtosis: (24.0 / n as f64).sqrt(),
    })
}

/// Skewness `m₃/m₂^{3/2}` and excess kurtosis `m₄/m₂² − 3`.
pub fn moments(samples: &[f64]) -> Result<MomentSummary> {
    summarize(&Moments::from_slice(samples), 20)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamNormality {
    pub stream: String,
    pub n: usize,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub se_skewness: f64,
    pub se_kurtosis: f64,
    pub jb_statistic: f64,
    pub critical_value: f64,
    pub jb_pass: bool,
}

pub fn jarque_bera_statistic(n: usize, skewness: f64, excess_kurtosis: f64) -> f64 {
    n as f64 / 6.0 * (skewness * skewness + excess_kurtosis * excess_kurtosis / 4.0)
}

fn jb_from_moments(stream: &str, m: &Moments, confidence: f64) -> Result<StreamNormality> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence {confidence} outside (0, 1)"
        )));
    }
    let s = summarize(m, 100)?;
    let jb = jarque_bera_statistic(s.n, s.skewness, s.excess_kurtosis);
    let critical_value = chi2_2dof_quantile(confidence);
    Ok(StreamNormality {
        stream: stream.to_string(),
        n: s.n,
        skewness: s.skewness,
        excess_kurtosis: s.excess_kurtosis,
        se_skewness: s.se_skewness,
        se_kurtosis: s.se_kurtosis,
        jb_statistic: jb,
        critical_value,
        jb_pass: jb < critical_value,
    })
}

/// Jarque-Bera test `JB = (n/6)(S² + K²/4)`, passing when JB is below the
/// chi-square(2) quantile at `confidence`.
pub fn jarque_bera(samples: &[f64], confidence: f64) -> Result<StreamNormality> {
    jb_from_moments("samples", &Moments::from_slice(samples), confidence)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub confidence: f64,
    pub streams: Vec<StreamNormality>,
    pub all_pass: bool,
}

impl NormalityReport {
    pub fn stream(&self, name: &str) -> Option<&StreamNormality> {
        self.streams.iter().find(|s| s.stream == name)
    }
}

pub const STREAM_NAMES: [&str; 4] = ["bob_x", "bob_p", "alice_x", "alice_p"];

/// Jarque-Bera on Bob's two outcome streams and Alice's X and P subsequences.
pub fn normality_report(record: &MeasurementRecord, confidence: f64) -> Result<NormalityReport> {
    let acc = record
        .shots
        .par_chunks(SHARD_SIZE)
        .map(|chunk| {
            let mut m = [Moments::new(); 4];
            for s in chunk {
                m[0].push(s.bob_x);
                m[1].push(s.bob_p);
                match s.alice_quad {
                    Quadrature::X => m[2].push(s.alice_value),
                    Quadrature::P => m[3].push(s.alice_value),
                }
            }
            m
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold([Moments::new(); 4], |a, b| {
            [0, 1, 2, 3].map(|i| a[i].merge(&b[i]))
        });
    let streams = STREAM_NAMES
        .iter()
        .zip(acc.iter())
        .map(|(name, m)| jb_from_moments(name, m, confidence))
        .collect::<Result<Vec<_>>>()?;
    let all_pass = streams.iter().all(|s| s.jb_pass);
    Ok(NormalityReport {
        confidence,
        streams,
        all_pass,
    })
}

/// Agreement between an estimated and a predicted purity, in units of the
/// estimate's standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurityCheck {
    pub estimated: f64,
    pub standard_error: f64,
    pub predicted: f64,
    pub z: f64,
    pub pass: bool,
}

pub fn purity_consistency(estimated: f64, standard_error: f64, predicted: f64, k_sigma: f64) -> PurityCheck {
    let z = (estimated - predicted) / standard_error;
    PurityCheck {
        estimated,
        standard_error,
        predicted,
        z,
        pass: z.abs() <= k_sigma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn naive(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let c = |k: i32| v.iter().map(|x| (x - m).powi(k)).sum::<f64>() / n;
        (c(3) / c(2).powf(1.5), c(4) / (c(2) * c(2)) - 3.0)
    }

    #[test]
    fn chi_square_constant() {
        assert_relative_eq!(chi2_2dof_quantile(0.95), CHI2_2DOF_95, epsilon = 1e-12);
        assert!((CHI2_2DOF_95 - 5.9915).abs() < 1e-4);
    }

    #[test]
    fn streaming_matches_two_pass() {
        let v: Vec<f64> = normals(200_001, 1).iter().map(|x| x.exp()).collect();
        let m = moments(&v).unwrap();
        let (s, k) = naive(&v);
        assert_relative_eq!(m.skewness, s, max_relative = 1e-9);
        assert_relative_eq!(m.excess_kurtosis, k, max_relative = 1e-9);
    }

    #[test]
    fn balanced_two_point_sample_has_zero_skew() {
        let v: Vec<f64> = (0..1000).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let m = moments(&v).unwrap();
        assert!(m.skewness.abs() < 1e-12);
        assert_relative_eq!(m.excess_kurtosis, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_normal_moments_vanish() {
        let m = moments(&normals(1_000_000, 2)).unwrap();
        assert!(m.skewness.abs() < 4.0 * m.se_skewness);
        assert!(m.excess_kurtosis.abs() < 4.0 * m.se_kurtosis);
    }

    #[test]
    fn exponential_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Exp::new(1.0).unwrap();
        let v: Vec<f64> = (0..1_000_000).map(|_| e.sample(&mut rng)).collect();
        let m = moments(&v).unwrap();
        assert_relative_eq!(m.skewness, 2.0, max_relative = 0.05);
        assert_relative_eq!(m.excess_kurtosis, 6.0, max_relative = 0.05);
    }

    #[test]
    fn degenerate_and_small_inputs() {
        assert!(matches!(moments(&[1.0; 50]), Err(Error::Degenerate(_))));
        assert!(matches!(moments(&[1.0, 2.0]), Err(Error::InsufficientShots(_))));
        assert!(jarque_bera(&normals(50, 1), 0.95).is_err());
    }

    #[test]
    fn jb_formula_examples() {
        assert_eq!(jarque_bera_statistic(1000, 0.0, 0.0), 0.0);
        let jb = jarque_bera_statistic(1_000_000, 0.01, 0.01);
        assert_relative_eq!(jb, 1e6 / 6.0 * (1e-4 + 2.5e-5), max_relative = 1e-12);
        assert_relative_eq!(jb, 20.833_333, epsilon = 1e-5);
        assert!(jb > CHI2_2DOF_95);
    }

    #[test]
    fn jb_reported_statistic_is_consistent() {
        let r = jarque_bera(&normals(10_000, 4), 0.95).unwrap();
        assert_eq!(r.jb_statistic, jarque_bera_statistic(r.n, r.skewness, r.excess_kurtosis));
    }

    #[test]
    fn jb_size_on_normal_samples() {
        let passes = (0..500u64)
            .into_par_iter()
            .filter(|&t| jarque_bera(&normals(5000, 1000 + t), 0.95).unwrap().jb_pass)
            .count();
        let rate = passes as f64 / 500.0;
        assert!((rate - 0.95).abs() <= 0.03, "pass rate {rate}");
    }

    #[test]
    fn purity_check() {
        let c = purity_consistency(0.515, 0.01, 0.5, 2.0);
        assert_relative_eq!(c.z, 1.5, epsilon = 1e-9);
        assert!(c.pass);
        assert!(!purity_consistency(0.53, 0.01, 0.5, 2.0).pass);
    }

    proptest! {
        #[test]
        fn merge_is_exact(split in 1usize..199, seed in 0u64..1000) {
            let v: Vec<f64> = normals(200, seed).iter().map(|x| x * x + x).collect();
            let mut whole = Moments::new();
            v.iter().for_each(|&x| whole.push(x));
            let (mut a, mut b) = (Moments::new(), Moments::new());
            v[..split].iter().for_each(|&x| a.push(x));
            v[split..].iter().for_each(|&x| b.push(x));
            let m = a.merge(&b);
            prop_assert!((m.skewness() - whole.skewness()).abs() < 1e-9);
            prop_assert!((m.excess_kurtosis() - whole.excess_kurtosis()).abs() < 1e-9);
            prop_assert!((m.variance() - whole.variance()).abs() < 1e-9);
        }

        #[test]
        fn affine_invariance(scale in 0.01f64..100.0, shift in -50.0f64..50.0, seed in 0u64..1000) {
            let v: Vec<f64> = normals(500, seed).iter().map(|x| x.exp()).collect();
            let base = moments(&v).unwrap();
            let pos: Vec<f64> = v.iter().map(|x| scale * x + shift).collect();
            let neg: Vec<f64> = v.iter().map(|x| -scale * x + shift).collect();
            let p = moments(&pos).unwrap();
            let q = moments(&neg).unwrap();
            prop_assert!((p.skewness - base.skewness).abs() < 1e-8);
            prop_assert!((p.excess_kurtosis - base.excess_kurtosis).abs() < 1e-8);
            prop_assert!((q.skewness + base.skewness).abs() < 1e-8);
            prop_assert!((q.excess_kurtosis - base.excess_kurtosis).abs() < 1e-8);
        }
    }
}
