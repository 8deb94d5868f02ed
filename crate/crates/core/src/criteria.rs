//! Covariance reconstruction from measurement records and the Reid and Duan
//! entanglement criteria, with bootstrap uncertainties.
//!
//! Everything reported here is in shot-noise units. Bob's heterodyne
//! outcomes are deconvolved: the state variance is `2·Var(outcome) − 1`.
//! Cross-covariances are `2·Cov(alice, bob)` on the subsample in which Alice
//! measured the matching quadrature.

use nalgebra::Matrix4;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianState};
use crate::measurement::{MeasurementRecord, Quadrature, Shot};
use crate::rng::{self, Domain};
use crate::stats::{self, NormalityReport};

/// Minimum shots per Alice quadrature for a reconstruction.
pub const MIN_SHOTS_PER_QUADRATURE: usize = 100;

pub const DEFAULT_N_BOOT: usize = 500;

/// Lower and upper quantiles of a two-sided 2σ-equivalent interval.
pub const TWO_SIGMA_QUANTILES: (f64, f64) = (0.022_750_131_948_179_2, 0.977_249_868_051_820_8);

/// Upper bound on the number of resampling units in the record bootstrap.
pub const MAX_BOOTSTRAP_BLOCKS: usize = 20_000;

const MAX_REDRAWS_PER_REPLICATE: usize = 100;

// Per-quadrature layout of the sufficient statistics.
const N: usize = 0;
const SA: usize = 1;
const SAA: usize = 2;
const SBX: usize = 3;
const SBP: usize = 4;
const SBXX: usize = 5;
const SBPP: usize = 6;
const SBXP: usize = 7;
const SABX: usize = 8;
const SABP: usize = 9;
const WIDTH: usize = 10;

/// Additive sums from which a covariance estimate can be rebuilt; one set
/// per Alice quadrature.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SufficientStats {
    sums: [[f64; WIDTH]; 2],
}

impl Default for SufficientStats {
    fn default() -> Self {
        Self {
            sums: [[0.0; WIDTH]; 2],
        }
    }
}

impl std::ops::AddAssign<&SufficientStats> for SufficientStats {
    fn add_assign(&mut self, rhs: &SufficientStats) {
        for q in 0..2 {
            for k in 0..WIDTH {
                self.sums[q][k] += rhs.sums[q][k];
            }
        }
    }
}

impl SufficientStats {
    pub fn push(&mut self, shot: &Shot) {
        let s = &mut self.sums[shot.alice_quad.index()];
        let (a, bx, bp) = (shot.alice_value, shot.bob_x, shot.bob_p);
        s[N] += 1.0;
        s[SA] += a;
        s[SAA] += a * a;
        s[SBX] += bx;
        s[SBP] += bp;
        s[SBXX] += bx * bx;
        s[SBPP] += bp * bp;
        s[SBXP] += bx * bp;
        s[SABX] += a * bx;
        s[SABP] += a * bp;
    }

    pub fn from_shots(shots: &[Shot]) -> Self {
        let mut s = Self::default();
        shots.iter().for_each(|shot| s.push(shot));
        s
    }

    /// Sums over a whole record, accumulated shard-wise for accuracy.
    pub fn from_record(record: &MeasurementRecord) -> Self {
        record
            .shots
            .par_chunks(rng::SHARD_SIZE)
            .map(Self::from_shots)
            .collect::<Vec<_>>()
            .iter()
            .fold(Self::default(), |mut acc, s| {
                acc += s;
                acc
            })
    }

    pub fn count(&self, quad: Quadrature) -> usize {
        self.sums[quad.index()][N] as usize
    }

    pub fn total(&self) -> usize {
        self.count(Quadrature::X) + self.count(Quadrature::P)
    }

    /// Reconstructs the state covariance matrix in shot-noise units.
    pub fn reconstruct(&self, min_per_quadrature: usize) -> Result<CmEstimate> {
        let (nx, np) = (self.count(Quadrature::X), self.count(Quadrature::P));
        if nx < min_per_quadrature || np < min_per_quadrature {
            return Err(Error::InsufficientShots(format!(
                "{nx} X-shots and {np} P-shots, need at least {min_per_quadrature} of each"
            )));
        }
        let n = (nx + np) as f64;
        let [sx, sp] = self.sums;
        let bob_sum = |k: usize| sx[k] + sp[k];
        let mbx = bob_sum(SBX) / n;
        let mbp = bob_sum(SBP) / n;
        let vbx = bob_sum(SBXX) / n - mbx * mbx;
        let vbp = bob_sum(SBPP) / n - mbp * mbp;
        let cbxp = bob_sum(SBXP) / n - mbx * mbp;

        let mut cm = Matrix4::zeros();
        let mut se = Matrix4::zeros();
        let mut alice_var = [0.0; 2];
        for (q, s) in [sx, sp].iter().enumerate() {
            let nq = s[N];
            let ma = s[SA] / nq;
            let va = s[SAA] / nq - ma * ma;
            alice_var[q] = va;
            cm[(q, q)] = 2.0 * va;
            se[(q, q)] = 2.0 * va * (2.0 / nq).sqrt();
            let (mx, mp) = (s[SBX] / nq, s[SBP] / nq);
            let vx = s[SBXX] / nq - mx * mx;
            let vp = s[SBPP] / nq - mp * mp;
            for (j, (sab, mb, vb)) in [(s[SABX], mx, vx), (s[SABP], mp, vp)].into_iter().enumerate() {
                let c = sab / nq - ma * mb;
                let (r, col) = (q, 2 + j);
                cm[(r, col)] = 2.0 * c;
                cm[(col, r)] = 2.0 * c;
                let e = 2.0 * ((va * vb + c * c) / nq).sqrt();
                se[(r, col)] = e;
                se[(col, r)] = e;
            }
        }
        cm[(2, 2)] = 2.0 * vbx - 1.0;
        cm[(3, 3)] = 2.0 * vbp - 1.0;
        cm[(2, 3)] = 2.0 * cbxp;
        cm[(3, 2)] = 2.0 * cbxp;
        se[(2, 2)] = 2.0 * vbx * (2.0 / n).sqrt();
        se[(3, 3)] = 2.0 * vbp * (2.0 / n).sqrt();
        se[(2, 3)] = 2.0 * ((vbx * vbp + cbxp * cbxp) / n).sqrt();
        se[(3, 2)] = se[(2, 3)];
        if !(cm[(2, 2)] > 0.0 && cm[(3, 3)] > 0.0) {
            return Err(Error::Unphysical(format!(
                "deconvolved Bob variances ({:.4}, {:.4}) are not positive",
                cm[(2, 2)],
                cm[(3, 3)]
            )));
        }
        if !(alice_var[0] > 0.0 && alice_var[1] > 0.0) {
            return Err(Error::Degenerate("Alice subsample has zero variance".into()));
        }
        Ok(CmEstimate {
            cm_snu: cm,
            standard_errors: se,
            n_shots: nx + np,
            n_x: nx,
            n_p: np,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmEstimate {
    pub cm_snu: Matrix4<f64>,
    /// Large-sample standard errors of each entry (zero where the entry is
    /// fixed by the standard-form assumption).
    pub standard_errors: Matrix4<f64>,
    pub n_shots: usize,
    pub n_x: usize,
    pub n_p: usize,
}

/// Reconstructs the state covariance matrix (SNU) from a record.
pub fn reconstruct_cm(record: &MeasurementRecord) -> Result<CmEstimate> {
    SufficientStats::from_record(record).reconstruct(MIN_SHOTS_PER_QUADRATURE)
}

fn check_positive_definite(cm: &Matrix4<f64>) -> Result<()> {
    if cm.iter().any(|v| !v.is_finite()) || cm.cholesky().is_none() {
        return Err(Error::Unphysical(
            "covariance estimate is not positive definite".into(),
        ));
    }
    Ok(())
}

/// `V_{u|v} = V_u − Cov(u, v)²/V_v` for entries `u`, `v` of `cm`.
pub fn conditional_variance(cm: &Matrix4<f64>, u: usize, v: usize) -> Result<f64> {
    let vv = cm[(v, v)];
    if !(vv > 0.0) {
        return Err(Error::Degenerate(format!(
            "conditioning variance {vv} is not positive"
        )));
    }
    Ok(cm[(u, u)] - cm[(u, v)] * cm[(u, v)] / vv)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalVariances {
    pub xa_given_xb: f64,
    pub pa_given_pb: f64,
    pub xb_given_xa: f64,
    pub pb_given_pa: f64,
}

pub fn conditional_variances(cm: &Matrix4<f64>) -> Result<ConditionalVariances> {
    Ok(ConditionalVariances {
        xa_given_xb: conditional_variance(cm, 0, 2)?,
        pa_given_pb: conditional_variance(cm, 1, 3)?,
        xb_given_xa: conditional_variance(cm, 2, 0)?,
        pb_given_pa: conditional_variance(cm, 3, 1)?,
    })
}

/// Reid EPR products `(E_{B▶A}, E_{A▶B})`: the first is Bob's inference of
/// Alice's quadratures, the second the converse.
pub fn reid_epr(cm_snu: &Matrix4<f64>) -> Result<(f64, f64)> {
    check_positive_definite(cm_snu)?;
    let v = conditional_variances(cm_snu)?;
    Ok((v.xa_given_xb * v.pa_given_pb, v.xb_given_xa * v.pb_given_pa))
}

/// The normalised Duan sum at a fixed `λ`:
/// `[V(x_A − λx_B) + V(p_A + λp_B)] / [2(1 + λ²)]`.
pub fn duan_at(cm_snu: &Matrix4<f64>, lambda: f64) -> f64 {
    let v_minus = cm_snu[(0, 0)] - 2.0 * lambda * cm_snu[(0, 2)] + lambda * lambda * cm_snu[(2, 2)];
    let v_plus = cm_snu[(1, 1)] + 2.0 * lambda * cm_snu[(1, 3)] + lambda * lambda * cm_snu[(3, 3)];
    (v_minus + v_plus) / (2.0 * (1.0 + lambda * lambda))
}

/// Duan inseparability `I = inf_{λ>0} duan_at(λ)`; `I < 1` witnesses
/// entanglement.
///
/// With `λ = tan θ` the objective is half the quadratic form of
/// `[[a, −c], [−c, b]]` on the unit vector `(cos θ, sin θ)`, where
/// `a = σ_{xAxA} + σ_{pApA}`, `b = σ_{xBxB} + σ_{pBpB}` and
/// `c = σ_{xAxB} − σ_{pApB}`. Its minimum over the quadrant is the smaller
/// eigenvalue when `c > 0` and `min(a, b)` otherwise.
pub fn duan_inseparability(cm_snu: &Matrix4<f64>) -> Result<f64> {
    check_positive_definite(cm_snu)?;
    Ok(duan_minimum(cm_snu))
}

fn duan_minimum(cm_snu: &Matrix4<f64>) -> f64 {
    let a = cm_snu[(0, 0)] + cm_snu[(1, 1)];
    let b = cm_snu[(2, 2)] + cm_snu[(3, 3)];
    let c = cm_snu[(0, 2)] - cm_snu[(1, 3)];
    let cc = c * c;
    let det = a.mul_add(b, -cc) - c.mul_add(c, -cc);
    duan_from_form(a, b, c, det)
}

/// Minimum over the quadrant given the entries of `[[a, −c], [−c, b]]` and
/// its determinant.
fn duan_from_form(a: f64, b: f64, c: f64, det: f64) -> f64 {
    if c <= 0.0 {
        return 0.5 * a.min(b);
    }
    let half_sum = 0.5 * (a + b);
    let radius = (0.25 * (a - b) * (a - b) + c * c).sqrt();
    // Smaller eigenvalue as det/larger, which avoids cancellation when the
    // entries are large.
    (0.5 * det / (half_sum + radius)).max(0.0)
}

/// Optimal `λ` of [`duan_inseparability`], or `None` when the infimum sits
/// at the boundary of `λ > 0`.
pub fn duan_optimal_lambda(cm_snu: &Matrix4<f64>) -> Option<f64> {
    let a = cm_snu[(0, 0)] + cm_snu[(1, 1)];
    let b = cm_snu[(2, 2)] + cm_snu[(3, 3)];
    let c = cm_snu[(0, 2)] - cm_snu[(1, 3)];
    // The minimising direction has cos 2θ ∝ (b − a)/2 and sin 2θ ∝ c.
    (c > 0.0).then(|| (0.5 * c.atan2(0.5 * (b - a))).tan())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfectEprBound {
    pub transmissivity: f64,
    /// Duan value at `r = 12`.
    pub value: f64,
    /// Duan value at `r = 10`, the convergence check.
    pub value_r10: f64,
    pub converged: bool,
}

const PERFECT_EPR_R: f64 = 12.0;
const PERFECT_EPR_CHECK_R: f64 = 10.0;
const PERFECT_EPR_AGREEMENT: f64 = 1e-6;

/// Duan value of a TMSV with squeezing `r` after pure loss `t` on Bob,
/// without the squeezing guard of [`gaussian::make_tmsv`].
///
/// Independently rounded `cosh 2r` and `sinh 2r` lose `cosh² − sinh² = 1`
/// at large `r`, so the determinant of the Duan form is evaluated from
/// `e^{±2r}` as `4[T·e^{2r}e^{−2r} + cosh 2r·(1 − T)]`.
fn lossy_tmsv_duan(r: f64, t: f64) -> f64 {
    let (up, down) = ((2.0 * r).exp(), (-2.0 * r).exp());
    let v = 0.5 * (up + down);
    let cross = 0.5 * (up - down) * t.sqrt();
    let vb = t * v + 1.0 - t;
    let (a, b, c) = (2.0 * v, 2.0 * vb, 2.0 * cross);
    let det = 4.0 * (t * up * down + v * (1.0 - t));
    duan_from_form(a, b, c, det)
}

/// Duan value of an infinitely squeezed EPR state sent through a pure-loss
/// channel of transmissivity `t`, evaluated at `r = 12` and checked at
/// `r = 10`.
pub fn perfect_epr_bound(t: f64) -> Result<PerfectEprBound> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "transmissivity {t} outside (0, 1]"
        )));
    }
    let value = lossy_tmsv_duan(PERFECT_EPR_R, t);
    let value_r10 = lossy_tmsv_duan(PERFECT_EPR_CHECK_R, t);
    let converged = (value - value_r10).abs() < PERFECT_EPR_AGREEMENT;
    if !converged {
        log::warn!(
            "perfect-EPR bound at T = {t} not converged: r=12 gives {value}, r=10 gives {value_r10}"
        );
    }
    Ok(PerfectEprBound {
        transmissivity: t,
        value,
        value_r10,
        converged,
    })
}

/// Purity `1/√det σ` of a two-mode SNU covariance.
pub fn purity_snu(cm_snu: &Matrix4<f64>) -> Result<f64> {
    let det = cm_snu.determinant();
    if !(det > 0.0) {
        return Err(Error::Unphysical(format!(
            "covariance determinant {det} is not positive"
        )));
    }
    Ok(1.0 / det.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub low: f64,
    pub high: f64,
    pub standard_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point: f64,
    pub interval: BootstrapInterval,
    pub n_boot: usize,
    pub redraws: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Lower and upper quantiles of a two-sided 1σ-equivalent interval.
pub const ONE_SIGMA_QUANTILES: (f64, f64) = (0.158_655_253_931_457_05, 0.841_344_746_068_542_9);

fn interval_from_replicates(point: f64, reps: Vec<f64>) -> BootstrapInterval {
    interval_with_quantiles(point, reps, TWO_SIGMA_QUANTILES)
}

/// Percentile interval at the given quantiles, widened if needed so it
/// contains `point`, with the replicate standard deviation as standard
/// error.
pub fn interval_with_quantiles(point: f64, mut reps: Vec<f64>, quantiles: (f64, f64)) -> BootstrapInterval {
    let n = reps.len() as f64;
    let mean = reps.iter().sum::<f64>() / n;
    let sd = (reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    reps.sort_by(f64::total_cmp);
    let (ql, qh) = quantiles;
    BootstrapInterval {
        low: quantile(&reps, ql).min(point),
        high: quantile(&reps, qh).max(point),
        standard_error: sd,
    }
}

fn check_n_boot(n_boot: usize) -> Result<()> {
    if n_boot < 200 {
        return Err(Error::InvalidParameter(format!(
            "n_boot = {n_boot}, need at least 200"
        )));
    }
    Ok(())
}

/// Percentile bootstrap of `statistic` over items resampled with
/// replacement. Resamples on which the statistic is undefined are redrawn
/// and counted.
pub fn bootstrap_ci<T, F>(data: &[T], statistic: F, n_boot: usize, seed: u64) -> Result<BootstrapResult>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> Option<f64> + Sync,
{
    check_n_boot(n_boot)?;
    let point = statistic(data)
        .ok_or_else(|| Error::Degenerate("statistic undefined on the full sample".into()))?;
    let n = data.len();
    let reps: Vec<Result<(f64, usize)>> = (0..n_boot)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, Domain::Bootstrap, i as u64);
            let mut buf = Vec::with_capacity(n);
            for attempt in 0..=MAX_REDRAWS_PER_REPLICATE {
                buf.clear();
                buf.extend((0..n).map(|_| data[rng.random_range(0..n)].clone()));
                if let Some(v) = statistic(&buf) {
                    return Ok((v, attempt));
                }
            }
            Err(Error::Degenerate(format!(
                "statistic undefined on {MAX_REDRAWS_PER_REPLICATE} consecutive resamples"
            )))
        })
        .collect();
    finish_bootstrap(point, reps, n_boot)
}

fn finish_bootstrap(point: f64, reps: Vec<Result<(f64, usize)>>, n_boot: usize) -> Result<BootstrapResult> {
    let mut values = Vec::with_capacity(reps.len());
    let mut redraws = 0;
    for r in reps {
        let (v, k) = r?;
        values.push(v);
        redraws += k;
    }
    if redraws > 0 {
        log::info!("bootstrap redrew {redraws} undefined resamples");
    }
    Ok(BootstrapResult {
        point,
        interval: interval_from_replicates(point, values),
        n_boot,
        redraws,
    })
}

/// Point values of every reported statistic for one covariance estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Statistics {
    pub e_direct: f64,
    pub e_reverse: f64,
    pub duan_i: f64,
    pub conditional: ConditionalVariances,
    pub purity: f64,
}

impl Statistics {
    pub fn from_cm(cm_snu: &Matrix4<f64>) -> Result<Self> {
        let (e_direct, e_reverse) = reid_epr(cm_snu)?;
        Ok(Self {
            e_direct,
            e_reverse,
            duan_i: duan_inseparability(cm_snu)?,
            conditional: conditional_variances(cm_snu)?,
            purity: purity_snu(cm_snu)?,
        })
    }

    /// Analytic statistics of a known state.
    pub fn from_state(state: &GaussianState) -> Result<Self> {
        Self::from_cm(&gaussian::to_snu(state.cm()))
    }

    pub const NAMES: [&'static str; 8] = [
        "e_direct",
        "e_reverse",
        "duan_i",
        "v_xa_given_xb",
        "v_pa_given_pb",
        "v_xb_given_xa",
        "v_pb_given_pa",
        "purity",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.e_direct,
            self.e_reverse,
            self.duan_i,
            self.conditional.xa_given_xb,
            self.conditional.pa_given_pb,
            self.conditional.xb_given_xa,
            self.conditional.pb_given_pa,
            self.purity,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriteriaOptions {
    pub n_boot: usize,
    pub seed: u64,
    pub min_per_quadrature: usize,
    pub normality: bool,
}

impl Default for CriteriaOptions {
    fn default() -> Self {
        Self {
            n_boot: DEFAULT_N_BOOT,
            seed: 0,
            min_per_quadrature: MIN_SHOTS_PER_QUADRATURE,
            normality: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriteriaReport {
    pub cm_est: Matrix4<f64>,
    pub cm_standard_errors: Matrix4<f64>,
    pub e_direct: f64,
    pub e_reverse: f64,
    pub duan_i: f64,
    pub conditional: ConditionalVariances,
    pub purity: f64,
    /// 2σ bootstrap intervals keyed by [`Statistics::NAMES`].
    pub ci: Vec<(String, BootstrapInterval)>,
    pub n_shots: usize,
    pub n_boot: usize,
    pub bootstrap_units: usize,
    pub redraws: usize,
    pub normality: Option<NormalityReport>,
}

impl CriteriaReport {
    pub fn statistics(&self) -> Statistics {
        Statistics {
            e_direct: self.e_direct,
            e_reverse: self.e_reverse,
            duan_i: self.duan_i,
            conditional: self.conditional,
            purity: self.purity,
        }
    }

    pub fn interval(&self, name: &str) -> Option<&BootstrapInterval> {
        self.ci.iter().find(|(n, _)| n == name).map(|(_, i)| i)
    }

    /// Rows of `(name, value, ci_low, ci_high)`.
    pub fn rows(&self) -> Vec<(String, f64, f64, f64)> {
        Statistics::NAMES
            .iter()
            .zip(self.statistics().values())
            .map(|(name, v)| {
                let ci = self.interval(name).copied().unwrap_or(BootstrapInterval {
                    low: v,
                    high: v,
                    standard_error: 0.0,
                });
                (name.to_string(), v, ci.low, ci.high)
            })
            .collect()
    }
}

/// Sufficient statistics of contiguous blocks covering the record. With at
/// most [`MAX_BOOTSTRAP_BLOCKS`] shots every block is a single shot.
pub fn record_blocks(record: &MeasurementRecord) -> Vec<SufficientStats> {
    let n = record.len();
    let units = n.min(MAX_BOOTSTRAP_BLOCKS);
    (0..units)
        .into_par_iter()
        .map(|i| {
            let lo = i * n / units;
            let hi = (i + 1) * n / units;
            SufficientStats::from_shots(&record.shots[lo..hi])
        })
        .collect()
}

/// Resamples `blocks` with replacement `n_boot` times and evaluates
/// `statistic` on each reconstructed covariance. Returns one column of
/// replicates per statistic and the number of redrawn resamples.
pub fn block_bootstrap<F>(
    blocks: &[SufficientStats],
    n_boot: usize,
    seed: u64,
    min_per_quadrature: usize,
    statistic: F,
) -> Result<(Vec<Vec<f64>>, usize)>
where
    F: Fn(&CmEstimate) -> Result<Vec<f64>> + Sync,
{
    check_n_boot(n_boot)?;
    let units = blocks.len();
    if units == 0 {
        return Err(Error::InsufficientShots("empty record".into()));
    }
    let reps: Vec<Result<(Vec<f64>, usize)>> = (0..n_boot)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, Domain::Bootstrap, i as u64);
            for attempt in 0..=MAX_REDRAWS_PER_REPLICATE {
                let mut s = SufficientStats::default();
                for _ in 0..units {
                    s += &blocks[rng.random_range(0..units)];
                }
                if let Ok(v) = s.reconstruct(min_per_quadrature).and_then(|e| statistic(&e)) {
                    return Ok((v, attempt));
                }
            }
            Err(Error::Degenerate(format!(
                "statistic undefined on {MAX_REDRAWS_PER_REPLICATE} consecutive resamples"
            )))
        })
        .collect();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut redraws = 0;
    for r in reps {
        let (vals, k) = r?;
        redraws += k;
        if columns.is_empty() {
            columns = vec![Vec::with_capacity(n_boot); vals.len()];
        }
        for (c, v) in columns.iter_mut().zip(vals) {
            c.push(v);
        }
    }
    if redraws > 0 {
        log::info!("block bootstrap redrew {redraws} undefined resamples");
    }
    Ok((columns, redraws))
}

/// Reconstructs the covariance, evaluates every criterion and bootstraps
/// 2σ intervals by resampling record blocks with replacement.
pub fn criteria_report(record: &MeasurementRecord, options: &CriteriaOptions) -> Result<CriteriaReport> {
    check_n_boot(options.n_boot)?;
    let blocks = record_blocks(record);
    let est = SufficientStats::from_record(record).reconstruct(options.min_per_quadrature)?;
    let point = Statistics::from_cm(&est.cm_snu)?;
    let (columns, redraws) = block_bootstrap(
        &blocks,
        options.n_boot,
        options.seed,
        options.min_per_quadrature,
        |est| Ok(Statistics::from_cm(&est.cm_snu)?.values().to_vec()),
    )?;
    let units = blocks.len();
    let ci = Statistics::NAMES
        .iter()
        .zip(point.values())
        .zip(columns)
        .map(|((name, p), reps)| (name.to_string(), interval_from_replicates(p, reps)))
        .collect();
    let normality = if options.normality {
        match stats::normality_report(record, 0.95) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("normality diagnostics skipped: {e}");
                None
            }
        }
    } else {
        None
    };
    Ok(CriteriaReport {
        cm_est: est.cm_snu,
        cm_standard_errors: est.standard_errors,
        e_direct: point.e_direct,
        e_reverse: point.e_reverse,
        duan_i: point.duan_i,
        conditional: point.conditional,
        purity: point.purity,
        ci,
        n_shots: est.n_shots,
        n_boot: options.n_boot,
        bootstrap_units: units,
        redraws,
        normality,
    })
}

/// Mean and spread of statistics over equal contiguous runs of a record,
/// mirroring repeated experimental runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEnsemble {
    pub n_runs: usize,
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std_dev: Vec<f64>,
    pub standard_error: Vec<f64>,
}

pub fn run_ensemble(record: &MeasurementRecord, n_runs: usize, min_per_quadrature: usize) -> Result<RunEnsemble> {
    if n_runs < 2 {
        return Err(Error::InvalidParameter("need at least two runs".into()));
    }
    let n = record.len();
    let per_run: Vec<[f64; 8]> = (0..n_runs)
        .map(|i| {
            let part = &record.shots[i * n / n_runs..(i + 1) * n / n_runs];
            let est = SufficientStats::from_shots(part).reconstruct(min_per_quadrature)?;
            Ok(Statistics::from_cm(&est.cm_snu)?.values())
        })
        .collect::<Result<_>>()?;
    let k = n_runs as f64;
    let mut mean = vec![0.0; 8];
    let mut sd = vec![0.0; 8];
    for j in 0..8 {
        mean[j] = per_run.iter().map(|r| r[j]).sum::<f64>() / k;
        sd[j] = (per_run.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    }
    Ok(RunEnsemble {
        n_runs,
        names: Statistics::NAMES.iter().map(|s| s.to_string()).collect(),
        standard_error: sd.iter().map(|s| s / k.sqrt()).collect(),
        mean,
        std_dev: sd,
    })
}

/// Swaps the A and B labels of a covariance matrix.
pub fn swap_modes(cm: &Matrix4<f64>) -> Matrix4<f64> {
    let p = [2, 3, 0, 1];
    Matrix4::from_fn(|i, j| cm[(p[i], p[j])])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{make_tmsv, Mode};
    use crate::measurement::sample_shots;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn snu(state: &GaussianState) -> Matrix4<f64> {
        gaussian::to_snu(state.cm())
    }

    fn grid_duan(cm: &Matrix4<f64>) -> f64 {
        // Dense scan in θ = atan λ over (0, π/2), then ternary refinement
        // around the best grid point.
        let steps = 20_000;
        let h = std::f64::consts::FRAC_PI_2 / steps as f64;
        let f = |theta: f64| duan_at(cm, theta.tan());
        let best = (1..steps)
            .min_by(|&i, &j| f(i as f64 * h).total_cmp(&f(j as f64 * h)))
            .unwrap();
        let (mut lo, mut hi) = ((best - 1) as f64 * h, ((best + 1) as f64 * h).min(std::f64::consts::FRAC_PI_2 - 1e-15));
        lo = lo.max(1e-15);
        for _ in 0..200 {
            let (m1, m2) = (lo + (hi - lo) / 3.0, hi - (hi - lo) / 3.0);
            if f(m1) < f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        f(0.5 * (lo + hi)).min(f(h)).min(f(std::f64::consts::FRAC_PI_2 - h))
    }

    #[test]
    fn reid_examples() {
        let (d, r) = reid_epr(&Matrix4::identity()).unwrap();
        assert_eq!((d, r), (1.0, 1.0));
        for r in [0.2f64, 0.5, 1.1] {
            let (d, rev) = reid_epr(&snu(&make_tmsv(r).unwrap())).unwrap();
            let expected = 1.0 / (2.0 * r).cosh().powi(2);
            assert_relative_eq!(d, expected, max_relative = 1e-9);
            assert_relative_eq!(rev, expected, max_relative = 1e-9);
        }
    }

    #[test]
    fn matched_state_gives_reported_value() {
        let v = 1.0 / 0.484f64.sqrt();
        let r = 0.5 * v.acosh();
        let (d, _) = reid_epr(&snu(&make_tmsv(r).unwrap())).unwrap();
        assert_relative_eq!(d, 0.484, epsilon = 1e-12);
        assert_relative_eq!(v, 1.437, epsilon = 1e-3);
    }

    #[test]
    fn conditional_variance_of_tmsv_is_inverse_marginal() {
        let r = 0.5f64;
        let cv = conditional_variances(&snu(&make_tmsv(r).unwrap())).unwrap();
        assert_relative_eq!(cv.xa_given_xb, 1.0 / (2.0 * r).cosh(), max_relative = 1e-12);
        assert_relative_eq!(cv.pb_given_pa, 1.0 / (2.0 * r).cosh(), max_relative = 1e-12);
    }

    #[test]
    fn duan_examples() {
        assert_relative_eq!(duan_inseparability(&Matrix4::identity()).unwrap(), 1.0, epsilon = 1e-15);
        let t = make_tmsv(0.5).unwrap();
        assert_relative_eq!(duan_inseparability(&snu(&t)).unwrap(), (-1f64).exp(), max_relative = 1e-9);
        assert_relative_eq!(duan_optimal_lambda(&snu(&t)).unwrap(), 1.0, epsilon = 1e-12);
        let cut = t.apply_loss(Mode::B, 0.0, 0.0).unwrap();
        assert_relative_eq!(duan_inseparability(&snu(&cut)).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn duan_matches_grid_search_on_asymmetric_states() {
        let states = [
            make_tmsv(0.7).unwrap().apply_loss(Mode::B, 0.3, 0.0).unwrap(),
            make_tmsv(0.4).unwrap().apply_loss(Mode::B, 0.8, 0.3).unwrap(),
            make_tmsv(1.2).unwrap().apply_loss(Mode::A, 0.1, 0.0).unwrap(),
        ];
        for s in states {
            let cm = snu(&s);
            let closed = duan_inseparability(&cm).unwrap();
            assert_relative_eq!(closed, grid_duan(&cm), max_relative = 1e-8);
            let lam = duan_optimal_lambda(&cm).unwrap();
            assert_relative_eq!(duan_at(&cm, lam), closed, max_relative = 1e-12);
            assert!(duan_at(&cm, 1.0) >= closed - 1e-15);
        }
    }

    #[test]
    fn perfect_epr_bound_examples() {
        let one = perfect_epr_bound(1.0).unwrap();
        assert!(one.value.abs() < 1e-6);
        let tiny = perfect_epr_bound(1e-9).unwrap();
        assert_relative_eq!(tiny.value, 1.0, epsilon = 1e-6);
        let half = perfect_epr_bound(0.5).unwrap();
        assert!(half.converged && half.value > 0.0 && half.value < 1.0);
        // Large-V oracle: V = 10⁶ SNU, brute-force minimisation over λ.
        let v = 1e6f64;
        let r = 0.5 * v.acosh();
        let cm = snu(&make_tmsv(r).unwrap().apply_loss(Mode::B, 0.5, 0.0).unwrap());
        assert_relative_eq!(half.value, grid_duan(&cm), epsilon = 1e-5);
        assert_relative_eq!(half.value, 1.0 / 3.0, epsilon = 1e-6);
        let tenth = perfect_epr_bound(0.1).unwrap();
        assert_relative_eq!(tenth.value, 0.9 / 1.1, epsilon = 1e-6);
        assert!(perfect_epr_bound(0.0).is_err());
    }

    #[test]
    fn reconstruction_of_vacuum_and_tmsv() {
        for (state, seed) in [(GaussianState::vacuum(), 1u64), (make_tmsv(0.5).unwrap(), 2)] {
            let rec = sample_shots(&state, 1_000_000, seed).unwrap();
            let est = reconstruct_cm(&rec).unwrap();
            let truth = snu(&state);
            for i in 0..4 {
                for j in 0..4 {
                    if (i, j) == (0, 1) || (i, j) == (1, 0) {
                        assert_eq!(est.cm_snu[(i, j)], 0.0);
                        continue;
                    }
                    let err = (est.cm_snu[(i, j)] - truth[(i, j)]).abs();
                    assert!(
                        err <= 4.0 * est.standard_errors[(i, j)],
                        "entry ({i},{j}): {} vs {} (se {})",
                        est.cm_snu[(i, j)],
                        truth[(i, j)],
                        est.standard_errors[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn reconstruction_requires_shots_per_quadrature() {
        let rec = sample_shots(&GaussianState::vacuum(), 150, 1).unwrap();
        assert!(matches!(reconstruct_cm(&rec), Err(Error::InsufficientShots(_))));
    }

    #[test]
    fn constant_statistic_has_zero_width() {
        let data: Vec<f64> = (0..500).map(|i| i as f64).collect();
        let b = bootstrap_ci(&data, |_| Some(3.0), 200, 5).unwrap();
        assert_eq!((b.interval.low, b.interval.high), (3.0, 3.0));
        assert_eq!(b.interval.standard_error, 0.0);
        assert!(bootstrap_ci(&data, |_| Some(3.0), 100, 5).is_err());
    }

    #[test]
    fn variance_interval_matches_sampling_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let var = |xs: &[f64]| {
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            Some(xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
        };
        let b = bootstrap_ci(&data, var, 300, 9).unwrap();
        let s2 = b.point;
        // For normal data Var(s²) = 2σ⁴/(n−1); the 2σ interval spans 4 sd.
        let analytic = 4.0 * s2 * (2.0 / (data.len() as f64 - 1.0)).sqrt();
        let width = b.interval.high - b.interval.low;
        assert!((width / analytic - 1.0).abs() < 0.2, "width {width} vs {analytic}");
    }

    #[test]
    fn undefined_resamples_are_redrawn() {
        let data: Vec<f64> = (0..30).map(|i| i as f64).collect();
        // Undefined when the resample misses the largest item.
        let b = bootstrap_ci(&data, |xs| xs.contains(&29.0).then_some(1.0), 200, 3).unwrap();
        assert!(b.redraws > 0);
    }

    #[test]
    fn criteria_report_is_deterministic_and_consistent() {
        let state = make_tmsv(0.5).unwrap();
        let rec = sample_shots(&state, 100_000, 21).unwrap();
        let opts = CriteriaOptions {
            n_boot: 200,
            seed: 4,
            ..CriteriaOptions::default()
        };
        let a = criteria_report(&rec, &opts).unwrap();
        let b = criteria_report(&rec, &opts).unwrap();
        assert_eq!(a, b);
        let truth = Statistics::from_state(&state).unwrap();
        for (name, value) in Statistics::NAMES.iter().zip(truth.values()) {
            let ci = a.interval(name).unwrap();
            assert!(ci.low <= ci.high);
            assert!(
                (a.statistics().values()[Statistics::NAMES.iter().position(|n| n == name).unwrap()] - value).abs()
                    < 5.0 * ci.standard_error,
                "{name}"
            );
        }
        let est = reconstruct_cm(&rec).unwrap();
        let (d, _) = reid_epr(&est.cm_snu).unwrap();
        assert_eq!(a.e_direct, d);
        assert!(a.normality.is_some());
        assert_eq!(a.bootstrap_units, MAX_BOOTSTRAP_BLOCKS);
    }

    #[test]
    fn run_ensemble_spread_is_comparable_to_bootstrap() {
        let state = make_tmsv(0.5).unwrap();
        let rec = sample_shots(&state, 200_000, 22).unwrap();
        let ens = run_ensemble(&rec, 10, MIN_SHOTS_PER_QUADRATURE).unwrap();
        let rep = criteria_report(&rec, &CriteriaOptions { n_boot: 200, seed: 1, ..Default::default() }).unwrap();
        let ratio = ens.standard_error[0] / rep.interval("e_direct").unwrap().standard_error;
        assert!(ratio > 0.4 && ratio < 2.5, "ratio {ratio}");
    }

    #[test]
    fn estimates_converge_with_sample_size() {
        let state = make_tmsv(0.5).unwrap();
        let (truth, _) = reid_epr(&snu(&state)).unwrap();
        let err = |n: usize| -> f64 {
            // Mean absolute error over a few independent records.
            (0..4u64)
                .map(|s| {
                    let rec = sample_shots(&state, n, 100 + s).unwrap();
                    (reid_epr(&reconstruct_cm(&rec).unwrap().cm_snu).unwrap().0 - truth).abs()
                })
                .sum::<f64>()
                / 4.0
        };
        let coarse = err(10_000);
        let fine = err(1_000_000);
        assert!(coarse / fine >= 3.0, "{coarse} vs {fine}");
    }

    proptest! {
        #[test]
        fn criteria_swap_under_label_exchange(r in 0.05f64..1.5, t in 0.05f64..1.0, n_th in 0.0f64..0.5) {
            let s = make_tmsv(r).unwrap().apply_loss(Mode::B, t, n_th).unwrap();
            let cm = snu(&s);
            let swapped = swap_modes(&cm);
            let (d, rv) = reid_epr(&cm).unwrap();
            let (d2, rv2) = reid_epr(&swapped).unwrap();
            prop_assert!((d - rv2).abs() < 1e-12 * d.max(1.0));
            prop_assert!((rv - d2).abs() < 1e-12 * rv.max(1.0));
            let i1 = duan_inseparability(&cm).unwrap();
            let i2 = duan_inseparability(&swapped).unwrap();
            prop_assert!((i1 - i2).abs() < 1e-12);
            prop_assert!(duan_at(&cm, 1.0) >= i1 - 1e-12);
        }

        #[test]
        fn pure_tmsv_closed_forms(r in 0.0f64..3.0) {
            let cm = snu(&make_tmsv(r).unwrap());
            let (d, _) = reid_epr(&cm).unwrap();
            prop_assert!((d - 1.0 / (2.0 * r).cosh().powi(2)).abs() < 1e-9);
            prop_assert!((duan_inseparability(&cm).unwrap() - (-2.0 * r).exp()).abs() < 1e-9);
        }
    }
}
