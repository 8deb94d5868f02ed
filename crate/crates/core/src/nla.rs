//! Measurement-based noiseless linear amplification.
//!
//! Bob's heterodyne outcome pair is read as the complex amplitude
//! `α = bob_x + i·bob_p`. In shot-noise units this is `(x + ip)/√2`, and the
//! filter weight `exp{½(|α|² − α_C²)(1 − g⁻²)}` then reproduces the ideal
//! `g^n̂` reweighting of the Q-function inside the cutoff. Accepted outcomes
//! are rescaled by `1/g`.

use nalgebra::{Matrix2, Matrix4, SymmetricEigen, Vector2, Vector4};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::gaussian::{GaussianState, Mode, VACUUM_VARIANCE};
use crate::measurement::{heterodyne_outcome_covariance, MeasurementRecord, Shot};
use crate::quadrature::{self, Tolerance};
use crate::rng::{self, Domain, SHARD_SIZE};

/// Default cutoff in standard deviations of Bob's measured quadrature.
pub const DEFAULT_CUTOFF_SD: f64 = 4.5;

/// Outcome anisotropy above which a radially symmetric cutoff is flagged.
pub const ANISOTROPY_WARN: f64 = 2.0;

const GAIN_RESOLUTION: f64 = 1e-6;
const GAIN_SEARCH_CAP: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub gain: f64,
    pub alpha_c: f64,
}

impl FilterSpec {
    pub fn new(gain: f64, alpha_c: f64) -> Result<Self> {
        if !(gain >= 1.0) || !gain.is_finite() {
            return Err(Error::InvalidParameter(format!("gain {gain} must be finite and >= 1")));
        }
        if !(alpha_c >= 0.0) || !alpha_c.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "cutoff amplitude {alpha_c} must be finite and >= 0"
            )));
        }
        Ok(Self { gain, alpha_c })
    }

    /// `1 − g⁻²`, the coefficient of `|α|²/2` in the filter exponent.
    pub fn weight_coefficient(&self) -> f64 {
        1.0 - 1.0 / (self.gain * self.gain)
    }

    pub fn is_identity(&self) -> bool {
        self.gain == 1.0 || self.alpha_c == 0.0
    }
}

pub fn outcome_amplitude(shot: &Shot) -> Complex64 {
    Complex64::new(shot.bob_x, shot.bob_p)
}

/// Acceptance probability of the truncated filter at squared radius `r2`.
pub fn filter_probability_norm_sqr(r2: f64, spec: &FilterSpec) -> f64 {
    let c2 = spec.alpha_c * spec.alpha_c;
    if r2 >= c2 {
        1.0
    } else {
        (0.5 * (r2 - c2) * spec.weight_coefficient()).exp()
    }
}

pub fn filter_probability(alpha: Complex64, spec: &FilterSpec) -> f64 {
    filter_probability_norm_sqr(alpha.norm_sqr(), spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub alpha_c: f64,
    pub k_sd: f64,
    /// Standard deviation of Bob's measured quadrature in shot-noise units.
    pub sigma_snu: f64,
    /// Ratio of the larger to the smaller outcome-covariance eigenvalue.
    pub anisotropy: f64,
    pub warning: Option<String>,
}

/// Cutoff from an outcome covariance `S` (natural units): `α_C = k_sd·σ` with
/// `σ² = 2·(mean eigenvalue of S)`, the variance of Bob's measured quadrature
/// in shot-noise units.
pub fn cutoff_from_outcome_covariance(s: &Matrix2<f64>, k_sd: f64) -> Result<Cutoff> {
    if k_sd != 0.0 && !(3.0..=8.0).contains(&k_sd) {
        return Err(Error::InvalidParameter(format!(
            "cutoff k_sd = {k_sd} outside [3, 8]"
        )));
    }
    let eig = SymmetricEigen::new(*s).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) {
        return Err(Error::Degenerate(format!(
            "outcome covariance is not positive definite: {s:?}"
        )));
    }
    let sigma_snu = (2.0 * 0.5 * (lo + hi)).sqrt();
    let anisotropy = hi / lo;
    let warning = (anisotropy > ANISOTROPY_WARN).then(|| {
        let msg = format!(
            "outcome covariance anisotropy {anisotropy:.3} exceeds {ANISOTROPY_WARN}; radial cutoff uses the mean eigenvalue"
        );
        log::warn!("{msg}");
        msg
    });
    Ok(Cutoff {
        alpha_c: k_sd * sigma_snu,
        k_sd,
        sigma_snu,
        anisotropy,
        warning,
    })
}

pub fn choose_cutoff(state: &GaussianState, k_sd: f64) -> Result<Cutoff> {
    cutoff_from_outcome_covariance(&heterodyne_outcome_covariance(state), k_sd)
}

/// Cutoff sized from the empirical covariance of a record's Bob outcomes.
pub fn choose_cutoff_from_record(record: &MeasurementRecord, k_sd: f64) -> Result<Cutoff> {
    if record.len() < 2 {
        return Err(Error::InsufficientShots(
            "need at least two shots to size a cutoff".into(),
        ));
    }
    let n = record.len() as f64;
    let mean = record.shots.iter().map(Shot::bob).sum::<Vector2<f64>>() / n;
    let s = record
        .shots
        .iter()
        .map(|shot| {
            let d = shot.bob() - mean;
            d * d.transpose()
        })
        .sum::<Matrix2<f64>>()
        / n;
    cutoff_from_outcome_covariance(&s, k_sd)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub record: MeasurementRecord,
    pub p_success: f64,
    pub n_in: usize,
    pub n_accept: usize,
    /// Mean filter probability over the input shots, a lower-variance
    /// estimate of the acceptance rate.
    pub mean_filter_probability: f64,
}

/// Accepted shots (not yet rescaled) and summed acceptance probabilities for
/// a run of whole shards.
#[derive(Clone, Debug, Default)]
pub struct FilteredChunk {
    pub accepted: Vec<Shot>,
    pub probability_sum: f64,
}

/// Filters `shots`, which must start at shard `first_shard`. Each shot
/// consumes one uniform variate from the filter stream of its shard, so the
/// decisions do not depend on how the record is chunked.
pub fn filter_shards(shots: &[Shot], first_shard: usize, spec: &FilterSpec, seed: u64) -> FilteredChunk {
    let parts: Vec<FilteredChunk> = shots
        .par_chunks(SHARD_SIZE)
        .enumerate()
        .map(|(k, chunk)| {
            let mut rng = rng::stream(seed, Domain::Filter, (first_shard + k) as u64);
            let mut out = FilteredChunk::default();
            for shot in chunk {
                let p = filter_probability(outcome_amplitude(shot), spec);
                let u: f64 = rng.random();
                out.probability_sum += p;
                if u < p {
                    out.accepted.push(*shot);
                }
            }
            out
        })
        .collect();
    let mut all = FilteredChunk {
        accepted: Vec::with_capacity(parts.iter().map(|p| p.accepted.len()).sum()),
        probability_sum: 0.0,
    };
    for p in parts {
        all.accepted.extend(p.accepted);
        all.probability_sum += p.probability_sum;
    }
    all
}

pub fn rescale_shot(shot: &Shot, gain: f64) -> Shot {
    Shot {
        bob_x: shot.bob_x / gain,
        bob_p: shot.bob_p / gain,
        ..*shot
    }
}

/// Post-selects `record` with the truncated filter and rescales the kept Bob
/// outcomes by `1/g`. A unit gain returns the record unchanged.
pub fn apply_mbnla(record: &MeasurementRecord, spec: &FilterSpec, seed: u64) -> Result<FilterOutcome> {
    if record.meta.is_filtered() {
        return Err(Error::AlreadyFiltered(record.meta.gain));
    }
    let n_in = record.len();
    if spec.gain == 1.0 {
        return Ok(FilterOutcome {
            record: record.clone(),
            p_success: 1.0,
            n_in,
            n_accept: n_in,
            mean_filter_probability: 1.0,
        });
    }
    let chunk = filter_shards(&record.shots, 0, spec, seed);
    let mean_p = if n_in == 0 { 0.0 } else { chunk.probability_sum / n_in as f64 };
    if chunk.accepted.is_empty() {
        return Err(Error::EmptyEnsemble {
            n_in,
            p_success_estimate: mean_p,
        });
    }
    let n_accept = chunk.accepted.len();
    let shots = chunk.accepted.iter().map(|s| rescale_shot(s, spec.gain)).collect();
    let mut meta = record.meta.clone();
    meta.gain = spec.gain;
    meta.alpha_c = spec.alpha_c;
    meta.filter_seed = seed;
    meta.rescaled = true;
    Ok(FilterOutcome {
        record: MeasurementRecord { meta, shots },
        p_success: n_accept as f64 / n_in as f64,
        n_in,
        n_accept,
        mean_filter_probability: mean_p,
    })
}

fn q_precision(state: &GaussianState) -> Result<Matrix4<f64>> {
    let sigma_q = state.cm() + Matrix4::identity() * VACUUM_VARIANCE;
    sigma_q
        .try_inverse()
        .ok_or_else(|| Error::Numeric("Q-function covariance is singular".into()))
}

fn weighted_precision(precision: &Matrix4<f64>, gain: f64) -> Matrix4<f64> {
    let k = 1.0 - 1.0 / (gain * gain);
    let mut p = *precision;
    let o = Mode::B.offset();
    p[(o, o)] -= k;
    p[(o + 1, o + 1)] -= k;
    p
}

fn is_positive_definite(m: &Matrix4<f64>) -> bool {
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky().is_some()
}

/// Supremum gain for which the ideal amplifier keeps Bob's reweighted
/// Q-function normalisable, found by bisection to 1e-6. Returns infinity when
/// no bound is found below 1e6.
pub fn gain_bound(state: &GaussianState) -> Result<f64> {
    let p = q_precision(state)?;
    let ok = |g: f64| is_positive_definite(&weighted_precision(&p, g));
    if ok(GAIN_SEARCH_CAP) {
        return Ok(f64::INFINITY);
    }
    let (mut lo, mut hi) = (1.0, 2.0);
    while ok(hi) {
        lo = hi;
        hi *= 2.0;
    }
    while hi - lo > GAIN_RESOLUTION {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// The ideal `g^n̂` amplifier on Bob's mode, applied to the two-mode state by
/// reweighting its Q-function with `e^{(1−g⁻²)|β|²}` and substituting
/// `β = gα`. Means transform along with the covariance.
pub fn analytic_nla(state: &GaussianState, gain: f64) -> Result<GaussianState> {
    if !(gain >= 1.0) || !gain.is_finite() {
        return Err(Error::InvalidParameter(format!("gain {gain} must be finite and >= 1")));
    }
    if gain == 1.0 {
        return Ok(state.clone());
    }
    let p = q_precision(state)?;
    let weighted = weighted_precision(&p, gain);
    let exceeds = || -> Error {
        Error::GainExceedsBound {
            gain,
            bound: gain_bound(state).unwrap_or(f64::NAN),
        }
    };
    if !is_positive_definite(&weighted) {
        return Err(exceeds());
    }
    let sigma = weighted.try_inverse().ok_or_else(exceeds)?;
    let sigma = (sigma + sigma.transpose()) * 0.5;
    let mean_q = sigma * (p * state.mean());
    let d = Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 1.0 / gain, 1.0 / gain));
    let cm = d * sigma * d - Matrix4::identity() * VACUUM_VARIANCE;
    let mean = d * mean_q;
    let label = format!("{} -> nla(g={gain})", state.label());
    GaussianState::new(cm, mean, label).map_err(|e| match e {
        Error::Unphysical(_) => exceeds(),
        other => other,
    })
}

/// Polar integrals over Bob's outcome density, split at the cutoff radius.
struct OutcomeDensity {
    mean: Vector2<f64>,
    precision: Matrix2<f64>,
    norm: f64,
    max_sd: f64,
}

impl OutcomeDensity {
    fn new(state: &GaussianState) -> Result<Self> {
        let s = heterodyne_outcome_covariance(state);
        let det = s.determinant();
        let precision = s
            .try_inverse()
            .filter(|_| det > 0.0)
            .ok_or_else(|| Error::Numeric(format!("outcome covariance singular: {s:?}")))?;
        let eig = SymmetricEigen::new(s).eigenvalues;
        Ok(Self {
            mean: Vector2::new(state.mean()[2], state.mean()[3]),
            precision,
            norm: 1.0 / (2.0 * PI * det.sqrt()),
            max_sd: eig.max().sqrt(),
        })
    }

    fn pdf(&self, b: Vector2<f64>) -> f64 {
        let d = b - self.mean;
        self.norm * (-0.5 * (d.transpose() * self.precision * d)[0]).exp()
    }

    /// `∫ f(b) N(b) db` over the annulus `r0 ≤ |b| < r1`.
    fn integrate<F>(&self, r0: f64, r1: f64, f: F, tol: Tolerance) -> Result<f64>
    where
        F: Fn(Vector2<f64>, f64) -> f64,
    {
        let mut err = None;
        let (v, _) = quadrature::integrate(
            |theta| {
                let (s, c) = theta.sin_cos();
                let inner = quadrature::integrate(
                    |r| {
                        let b = Vector2::new(r * c, r * s);
                        r * f(b, r * r) * self.pdf(b)
                    },
                    r0,
                    r1,
                    tol,
                );
                match inner {
                    Ok((v, _)) => v,
                    Err(e) => {
                        err.get_or_insert(e);
                        0.0
                    }
                }
            },
            0.0,
            2.0 * PI,
            tol,
        )?;
        match err {
            Some(e) => Err(e),
            None => Ok(v),
        }
    }

    fn outer_radius(&self, r: f64) -> f64 {
        r + self.mean.norm() + 40.0 * self.max_sd
    }
}

fn success_tolerance() -> Tolerance {
    Tolerance {
        abs: 1e-16,
        rel: 1e-9,
        max_intervals: 4000,
    }
}

/// Expected acceptance rate of the truncated filter on `state`: the disk
/// integral of `P(α)` against Bob's outcome density plus the Gaussian mass
/// outside the cutoff.
pub fn analytic_success_probability(state: &GaussianState, spec: &FilterSpec) -> Result<f64> {
    if spec.is_identity() {
        return Ok(1.0);
    }
    let density = OutcomeDensity::new(state)?;
    let tol = success_tolerance();
    let r_c = spec.alpha_c;
    let inside = density.integrate(0.0, r_c, |_, r2| filter_probability_norm_sqr(r2, spec), tol)?;
    let outside = density.integrate(r_c, density.outer_radius(r_c), |_, _| 1.0, tol)?;
    Ok((inside + outside).min(1.0))
}

/// Exact expectation of the post-selected, rescaled ensemble under the
/// truncated filter: the covariance a perfectly sampled record would
/// reconstruct to. Differences from [`analytic_nla`] measure the bias due
/// to the finite cutoff.
#[derive(Clone, Debug)]
pub struct TruncatedNla {
    /// Post-selected state covariance (natural units, Bob deconvolved).
    pub cm: Matrix4<f64>,
    pub mean: Vector4<f64>,
    pub p_success: f64,
}

pub fn truncated_nla(state: &GaussianState, spec: &FilterSpec) -> Result<TruncatedNla> {
    if spec.is_identity() {
        return Ok(TruncatedNla {
            cm: *state.cm(),
            mean: *state.mean(),
            p_success: 1.0,
        });
    }
    let density = OutcomeDensity::new(state)?;
    let tol = success_tolerance();
    let r_c = spec.alpha_c;
    let r_out = density.outer_radius(r_c);
    let weight = |b: Vector2<f64>, r2: f64, f: &dyn Fn(Vector2<f64>) -> f64| {
        filter_probability_norm_sqr(r2, spec) * f(b)
    };
    let moment = |f: &dyn Fn(Vector2<f64>) -> f64| -> Result<f64> {
        let a = density.integrate(0.0, r_c, |b, r2| weight(b, r2, f), tol)?;
        let b = density.integrate(r_c, r_out, |b, _| f(b), tol)?;
        Ok(a + b)
    };
    let m0 = moment(&|_| 1.0)?;
    let m1 = Vector2::new(moment(&|b| b[0])?, moment(&|b| b[1])?) / m0;
    let mut m2 = Matrix2::zeros();
    for i in 0..2 {
        for j in i..2 {
            let v = moment(&|b| (b[i] - m1[i]) * (b[j] - m1[j]))? / m0;
            m2[(i, j)] = v;
            m2[(j, i)] = v;
        }
    }

    let cm = state.cm();
    let s = heterodyne_outcome_covariance(state);
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::Numeric("outcome covariance singular".into()))?;
    let a = cm.fixed_view::<2, 2>(0, 0).into_owned();
    let c = cm.fixed_view::<2, 2>(0, 2).into_owned();
    let reg = c * s_inv;
    let g = spec.gain;
    let alice = a - reg * c.transpose() + reg * m2 * reg.transpose();
    let cross = reg * m2 / g;
    let bob = m2 / (g * g) - Matrix2::identity() * VACUUM_VARIANCE;
    let mut out = Matrix4::zeros();
    out.fixed_view_mut::<2, 2>(0, 0).copy_from(&alice);
    out.fixed_view_mut::<2, 2>(0, 2).copy_from(&cross);
    out.fixed_view_mut::<2, 2>(2, 0).copy_from(&cross.transpose());
    out.fixed_view_mut::<2, 2>(2, 2).copy_from(&bob);

    let mu = state.mean();
    let mu_b = Vector2::new(mu[2], mu[3]);
    let mu_a = Vector2::new(mu[0], mu[1]) + reg * (m1 - mu_b);
    let mean = Vector4::new(mu_a[0], mu_a[1], m1[0] / g, m1[1] / g);
    Ok(TruncatedNla {
        cm: (out + out.transpose()) * 0.5,
        mean,
        p_success: m0.min(1.0),
    })
}
