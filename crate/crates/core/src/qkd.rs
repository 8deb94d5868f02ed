//! Asymptotic key rate of a direct-reconciliation, heterodyne-heterodyne
//! protocol, with every impurity of the measured covariance attributed to
//! the eavesdropper.
//!
//! Covariance inputs are in shot-noise units.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Matrix2, Matrix4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{self, BootstrapInterval, SufficientStats, ONE_SIGMA_QUANTILES};
use crate::error::{Error, Result};
use crate::gaussian::{self, from_snu, GaussianState, Mode};
use crate::measurement::{self, MeasurementRecord};
use crate::nla::{self, FilterSpec};

pub const DEFAULT_BETA: f64 = 0.98;

/// Standard-form mismatch above which the channel model is flagged.
pub const CHANNEL_RESIDUAL_WARN: f64 = 1e-3;

static CLAMP_EVENTS: AtomicUsize = AtomicUsize::new(0);

/// Number of times a negative Holevo quantity has been clamped to zero in
/// this process.
pub fn clamp_events() -> usize {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// Pure TMSV of variance `v_source` sent through loss `t_eff` with excess
/// noise `xi` referred to the channel input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveChannel {
    pub v_source: f64,
    pub t_eff: f64,
    pub xi: f64,
    pub residual: f64,
    pub degenerate: bool,
    pub warning: Option<String>,
}

fn det2(m: &Matrix2<f64>) -> f64 {
    m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
}

fn blocks(cm: &Matrix4<f64>) -> (Matrix2<f64>, Matrix2<f64>, Matrix2<f64>) {
    (
        cm.fixed_view::<2, 2>(0, 0).into_owned(),
        cm.fixed_view::<2, 2>(2, 2).into_owned(),
        cm.fixed_view::<2, 2>(0, 2).into_owned(),
    )
}

/// Fits the entangling-cloner model to the local symplectic invariants of
/// `cm_snu`.
///
/// The standard form has `A = a·I`, `B = b·I`, `C = diag(c₊, c₋)`, while the
/// model forces `c₋ = −c₊`. The correlation amplitude is the least-squares
/// compromise `c̄ = (c₊ − c₋)/2` and the residual is the distance
/// `|c₊ + c₋|/√2` left over.
pub fn effective_channel(cm_snu: &Matrix4<f64>) -> Result<EffectiveChannel> {
    let (ba, bb, bc) = blocks(cm_snu);
    let (det_a, det_b, det_c) = (det2(&ba), det2(&bb), det2(&bc));
    if !(det_a > 0.0 && det_b > 0.0) {
        return Err(Error::Unphysical(format!(
            "local determinants {det_a}, {det_b} must be positive"
        )));
    }
    let a = det_a.sqrt();
    let b = det_b.sqrt();
    let det = cm_snu.determinant();
    let sum_sq = ((a * a * b * b + det_c * det_c - det) / (a * b)).max(0.0);
    let disc = (sum_sq * sum_sq - 4.0 * det_c * det_c).max(0.0).sqrt();
    let c_plus = (0.5 * (sum_sq + disc)).sqrt();
    let c_minus = if c_plus > 0.0 { det_c / c_plus } else { 0.0 };
    let c_bar = 0.5 * (c_plus - c_minus);
    let residual = (c_plus + c_minus).abs() / std::f64::consts::SQRT_2;

    let warning = (residual > CHANNEL_RESIDUAL_WARN).then(|| {
        let w = format!(
            "covariance departs from the pure-source model by {residual:.3e} SNU; \
             proceeding with the least-squares fit"
        );
        log::debug!("{w}");
        w
    });

    let excess = a * a - 1.0;
    if excess <= 1e-12 || c_bar * c_bar <= 1e-12 {
        return Ok(EffectiveChannel {
            v_source: a,
            t_eff: 0.0,
            xi: 0.0,
            residual,
            degenerate: true,
            warning,
        });
    }
    let t = c_bar * c_bar / excess;
    Ok(EffectiveChannel {
        v_source: a,
        t_eff: t,
        xi: (b - 1.0 + t) / t - a,
        residual,
        degenerate: false,
        warning,
    })
}

/// Mutual information in bits per channel use between Alice's and Bob's
/// dual-quadrature heterodyne outcomes,
/// `½ log₂ det(σ_A + I) / det(σ_{A|B} + I)` with
/// `σ_{A|B} = σ_A − C (σ_B + I)⁻¹ Cᵀ`.
pub fn mutual_information(cm_snu: &Matrix4<f64>) -> Result<f64> {
    let (ba, bb, bc) = blocks(cm_snu);
    let id = Matrix2::identity();
    let inv = (bb + id)
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular heterodyne outcome covariance".into()))?;
    let cond = ba - bc * inv * bc.transpose();
    let num = det2(&(ba + id));
    let den = det2(&(cond + id));
    if !(num > 0.0 && den > 0.0) {
        return Err(Error::Unphysical(format!(
            "heterodyne outcome determinants {num}, {den} must be positive"
        )));
    }
    Ok((0.5 * (num / den).log2()).max(0.0))
}

/// Terms of the Holevo bound `S(A:E) = S(AB) − S(B|A)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolevoBound {
    pub s_ae: f64,
    pub s_ab: f64,
    pub s_b_given_a: f64,
    /// Symplectic eigenvalues of the (projected) covariance, SNU.
    pub nu: [f64; 2],
    /// Symplectic eigenvalue of Bob's mode after Alice heterodynes, SNU.
    pub nu_conditional: f64,
    pub clamped: bool,
    pub projection_distance: f64,
}

/// Eve's Holevo information on Alice's heterodyne data.
///
/// The estimate is first projected onto the physical set. `S(B|A)` uses the
/// state Bob is left with after Alice's heterodyne.
pub fn holevo_bound(cm_snu: &Matrix4<f64>) -> Result<HolevoBound> {
    let projection = gaussian::project_physical(&from_snu(cm_snu))?;
    let state = GaussianState::from_cm(projection.cm, "holevo input")?;
    let nu = gaussian::symplectic_eigenvalues(state.cm())?;
    let s_ab = gaussian::von_neumann_entropy(state.cm())?;
    let cond = measurement::conditional_cm_after_heterodyne(&state, Mode::A)?;
    let nu_cond = cond.determinant().max(0.0).sqrt();
    let s_b_given_a = gaussian::single_mode_entropy(&cond)?;

    let raw = s_ab - s_b_given_a;
    let clamped = raw < 0.0;
    if clamped {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        log::debug!("clamped Holevo quantity {raw:.3e} to zero");
    }
    Ok(HolevoBound {
        s_ae: raw.max(0.0),
        s_ab,
        s_b_given_a,
        nu: nu.map(|v| 2.0 * v),
        nu_conditional: 2.0 * nu_cond,
        clamped,
        projection_distance: 2.0 * projection.distance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    pub gain: f64,
    pub beta_rec: f64,
    pub i_ab: f64,
    pub s_ae: f64,
    pub k: f64,
    pub s_ab: f64,
    pub s_b_given_a: f64,
    pub nu: [f64; 2],
    pub nu_conditional: f64,
    pub v_source: f64,
    pub t_eff: f64,
    pub xi: f64,
    pub channel_residual: f64,
    pub degenerate: bool,
    pub clamped: bool,
    pub projection_distance: f64,
    pub warning: Option<String>,
    /// Bootstrap 1σ interval on `k`, Monte Carlo mode only.
    pub k_interval: Option<BootstrapInterval>,
    pub n_shots: Option<usize>,
    pub p_success: Option<f64>,
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "reconciliation efficiency {beta} outside [0, 1]"
        )))
    }
}

/// `k = β I(A:B) − S(A:E)` for the covariance `cm_snu`. Negative rates are
/// returned as-is.
pub fn key_rate(cm_snu: &Matrix4<f64>, beta: f64) -> Result<KeyRateReport> {
    check_beta(beta)?;
    let i_ab = mutual_information(cm_snu)?;
    let h = holevo_bound(cm_snu)?;
    let ch = effective_channel(cm_snu)?;
    Ok(KeyRateReport {
        gain: 1.0,
        beta_rec: beta,
        i_ab,
        s_ae: h.s_ae,
        k: beta * i_ab - h.s_ae,
        s_ab: h.s_ab,
        s_b_given_a: h.s_b_given_a,
        nu: h.nu,
        nu_conditional: h.nu_conditional,
        v_source: ch.v_source,
        t_eff: ch.t_eff,
        xi: ch.xi,
        channel_residual: ch.residual,
        degenerate: ch.degenerate,
        clamped: h.clamped,
        projection_distance: h.projection_distance,
        warning: ch.warning,
        k_interval: None,
        n_shots: None,
        p_success: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    Analytic,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug)]
pub enum SweepSource<'a> {
    State(&'a GaussianState),
    Record(&'a MeasurementRecord),
}

/// Settings for the Monte Carlo branch of a sweep.
#[derive(Clone, Copy, Debug)]
pub struct MonteCarloOptions {
    pub alpha_c: f64,
    pub filter_seed: u64,
    pub n_boot: usize,
    pub boot_seed: u64,
    pub min_per_quadrature: usize,
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub gain: f64,
    pub outcome: Result<KeyRateReport>,
}

fn sweep_analytic_point(state: &GaussianState, bound: f64, gain: f64, beta: f64) -> Result<KeyRateReport> {
    if gain >= bound {
        return Err(Error::GainExceedsBound { gain, bound });
    }
    let out = nla::analytic_nla(state, gain)?;
    let mut report = key_rate(&out.cm_snu(), beta)?;
    report.gain = gain;
    Ok(report)
}

/// Key rate of the covariance reconstructed from `record`, with a 1σ
/// block-bootstrap interval on `k`.
pub fn key_rate_from_record(
    record: &MeasurementRecord,
    beta: f64,
    n_boot: usize,
    boot_seed: u64,
    min_per_quadrature: usize,
) -> Result<KeyRateReport> {
    let est = SufficientStats::from_record(record).reconstruct(min_per_quadrature)?;
    let mut report = key_rate(&est.cm_snu, beta)?;
    if let Some(w) = &report.warning {
        log::warn!("gain {}: {w}", record.meta.gain);
    }
    let blocks = criteria::record_blocks(record);
    let (columns, _) = criteria::block_bootstrap(&blocks, n_boot, boot_seed, min_per_quadrature, |e| {
        Ok(vec![key_rate(&e.cm_snu, beta)?.k])
    })?;
    let reps = columns.into_iter().next().unwrap_or_default();
    report.k_interval = Some(criteria::interval_with_quantiles(report.k, reps, ONE_SIGMA_QUANTILES));
    report.gain = record.meta.gain;
    report.n_shots = Some(record.len());
    Ok(report)
}

fn sweep_mc_point(
    record: &MeasurementRecord,
    gain: f64,
    beta: f64,
    mc: &MonteCarloOptions,
) -> Result<KeyRateReport> {
    let spec = FilterSpec::new(gain, mc.alpha_c)?;
    let filtered = nla::apply_mbnla(record, &spec, mc.filter_seed)?;
    let mut report = key_rate_from_record(&filtered.record, beta, mc.n_boot, mc.boot_seed, mc.min_per_quadrature)?;
    report.gain = gain;
    report.p_success = Some(filtered.p_success);
    Ok(report)
}

/// Key rate against amplifier gain. Failures at individual gains are kept in
/// the returned points and the sweep carries on.
///
/// Analytic mode applies the ideal amplifier to the state, or to the source
/// state of a record. Monte Carlo mode needs a record and post-selects it at
/// every gain, with a 1σ block-bootstrap interval on `k`.
pub fn keyrate_sweep(
    source: SweepSource<'_>,
    gains: &[f64],
    beta: f64,
    mode: SweepMode,
    mc: Option<&MonteCarloOptions>,
) -> Result<Vec<SweepPoint>> {
    check_beta(beta)?;
    if gains.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidParameter("gains must be sorted ascending".into()));
    }
    let points: Vec<SweepPoint> = match (mode, source) {
        (SweepMode::Analytic, src) => {
            let state = match src {
                SweepSource::State(s) => s,
                SweepSource::Record(r) => &r.meta.source,
            };
            let bound = nla::gain_bound(state)?;
            gains
                .par_iter()
                .map(|&g| SweepPoint {
                    gain: g,
                    outcome: sweep_analytic_point(state, bound, g, beta),
                })
                .collect()
        }
        (SweepMode::MonteCarlo, SweepSource::Record(record)) => {
            let mc = mc.ok_or_else(|| {
                Error::InvalidParameter("Monte Carlo sweep needs filter options".into())
            })?;
            gains
                .iter()
                .map(|&g| SweepPoint {
                    gain: g,
                    outcome: sweep_mc_point(record, g, beta, mc),
                })
                .collect()
        }
        (SweepMode::MonteCarlo, SweepSource::State(_)) => {
            return Err(Error::InvalidParameter(
                "Monte Carlo sweep needs a measurement record".into(),
            ))
        }
    };
    for p in &points {
        if let Err(e) = &p.outcome {
            log::warn!("key rate at gain {}: {e}", p.gain);
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, Tolerance};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector4;
    use proptest::prelude::*;

    fn model_cm(v: f64, t: f64, xi: f64) -> Matrix4<f64> {
        let b = t * (v + xi) + 1.0 - t;
        let c = (t * (v * v - 1.0)).sqrt();
        Matrix4::new(
            v, 0.0, c, 0.0, //
            0.0, v, 0.0, -c, //
            c, 0.0, b, 0.0, //
            0.0, -c, 0.0, b,
        )
    }

    fn lossy_tmsv(v: f64, t: f64, n_th: f64) -> GaussianState {
        let r = gaussian::tmsv_squeezing_for_variance(v).unwrap();
        gaussian::make_tmsv(r).unwrap().apply_loss(Mode::B, t, n_th).unwrap()
    }

    // Mutual information of a bivariate normal by direct integration of
    // p log p/(p_a p_b), in bits.
    fn gaussian_mi_integral(va: f64, vb: f64, c: f64) -> f64 {
        let det = va * vb - c * c;
        let pdf = |a: f64, b: f64| {
            (-(vb * a * a - 2.0 * c * a * b + va * b * b) / (2.0 * det)).exp()
                / (2.0 * std::f64::consts::PI * det.sqrt())
        };
        let marg = |x: f64, v: f64| (-x * x / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let la = 12.0 * va.sqrt();
        let lb = 12.0 * vb.sqrt();
        let tol = Tolerance {
            abs: 1e-13,
            rel: 1e-11,
            max_intervals: 4000,
        };
        let (v, _) = integrate(
            |a| {
                integrate(
                    |b| {
                        let p = pdf(a, b);
                        if p <= 0.0 {
                            0.0
                        } else {
                            p * (p / (marg(a, va) * marg(b, vb))).log2()
                        }
                    },
                    -lb,
                    lb,
                    tol,
                )
                .unwrap()
                .0
            },
            -la,
            la,
            tol,
        )
        .unwrap();
        v
    }

    #[test]
    fn lossless_channel_is_fixed_point() {
        let ch = effective_channel(&model_cm(2.0, 1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(ch.t_eff, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(ch.xi, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(ch.v_source, 2.0, epsilon = 1e-9);
        assert!(!ch.degenerate && ch.warning.is_none());
    }

    #[test]
    fn channel_parameters_round_trip() {
        let ch = effective_channel(&model_cm(2.0, 0.5, 0.05)).unwrap();
        assert_abs_diff_eq!(ch.t_eff, 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(ch.xi, 0.05, epsilon = 1e-6);
        assert_abs_diff_eq!(ch.v_source, 2.0, epsilon = 1e-6);
        assert!(ch.residual < 1e-12);
    }

    #[test]
    fn channel_fit_is_invariant_under_local_rotations() {
        let cm = model_cm(3.0, 0.7, 0.02);
        let (s, c) = 0.4f64.sin_cos();
        let rot = Matrix2::new(c, -s, s, c);
        let mut big = Matrix4::identity();
        big.fixed_view_mut::<2, 2>(2, 2).copy_from(&rot);
        let ch = effective_channel(&(big * cm * big.transpose())).unwrap();
        assert_abs_diff_eq!(ch.t_eff, 0.7, epsilon = 1e-9);
        assert_abs_diff_eq!(ch.xi, 0.02, epsilon = 1e-9);
    }

    #[test]
    fn identity_is_degenerate() {
        let ch = effective_channel(&Matrix4::identity()).unwrap();
        assert!(ch.degenerate);
        assert_abs_diff_eq!(ch.v_source, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn asymmetric_correlations_warn() {
        let mut cm = model_cm(2.0, 0.5, 0.0);
        cm[(1, 3)] *= 0.5;
        cm[(3, 1)] *= 0.5;
        let ch = effective_channel(&cm).unwrap();
        assert!(ch.residual > CHANNEL_RESIDUAL_WARN);
        assert!(ch.warning.is_some());
    }

    #[test]
    fn mutual_information_of_uncorrelated_modes_is_zero() {
        assert_abs_diff_eq!(mutual_information(&Matrix4::identity()).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn mutual_information_matches_outcome_integral() {
        // Heterodyne adds one unit of vacuum to each quadrature; with a
        // standard-form state the x and p outcome pairs are independent.
        let v = 2.0;
        let cm = model_cm(v, 1.0, 0.0);
        let c = cm[(0, 2)];
        let numeric = gaussian_mi_integral(v + 1.0, v + 1.0, c) + gaussian_mi_integral(v + 1.0, v + 1.0, -c);
        let i = mutual_information(&cm).unwrap();
        assert_abs_diff_eq!(i, numeric, epsilon = 1e-6);
        assert_abs_diff_eq!(i, 1.5f64.log2(), epsilon = 1e-12);
    }

    #[test]
    fn mutual_information_grows_with_source_variance() {
        let vals: Vec<f64> = (0..10)
            .map(|k| mutual_information(&model_cm(1.2 + 0.5 * k as f64, 1.0, 0.0)).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn pure_source_has_no_eavesdropper_information() {
        let h = holevo_bound(&model_cm(2.0, 1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(h.s_ae, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(h.s_ab, 0.0, epsilon = 1e-9);
        assert!(h.s_ae >= 0.0);
    }

    #[test]
    fn holevo_matches_closed_form_entropies() {
        let cm = model_cm(2.0, 0.5, 0.1);
        let (ba, bb, bc) = blocks(&cm);
        let delta = det2(&ba) + det2(&bb) + 2.0 * det2(&bc);
        let det = cm.determinant();
        let root = (delta * delta - 4.0 * det).sqrt();
        let nus = [((delta + root) / 2.0).sqrt(), ((delta - root) / 2.0).sqrt()];
        let g = |nu: f64| {
            let x = (nu - 1.0) / 2.0;
            if x <= 0.0 {
                0.0
            } else {
                (x + 1.0) * (x + 1.0).log2() - x * x.log2()
            }
        };
        let s_ab = g(nus[0]) + g(nus[1]);
        let cond = bb - bc.transpose() * (ba + Matrix2::identity()).try_inverse().unwrap() * bc;
        let s_cond = g(det2(&cond).sqrt());
        let h = holevo_bound(&cm).unwrap();
        assert_abs_diff_eq!(h.s_ab, s_ab, epsilon = 1e-9);
        assert_abs_diff_eq!(h.s_b_given_a, s_cond, epsilon = 1e-9);
        assert_abs_diff_eq!(h.s_ae, s_ab - s_cond, epsilon = 1e-9);
    }

    #[test]
    fn product_thermal_entropy_is_additive() {
        let cm = Matrix4::from_diagonal(&Vector4::new(3.0, 3.0, 1.8, 1.8));
        let h = holevo_bound(&cm).unwrap();
        let single = |v: f64| gaussian::single_mode_entropy(&(Matrix2::identity() * (v / 2.0))).unwrap();
        assert_abs_diff_eq!(h.s_ab, single(3.0) + single(1.8), epsilon = 1e-9);
    }

    #[test]
    fn key_rate_edge_cases() {
        let k = key_rate(&Matrix4::identity(), DEFAULT_BETA).unwrap();
        assert_abs_diff_eq!(k.k, 0.0, epsilon = 1e-12);
        let r = key_rate(&model_cm(2.0, 1.0, 0.0), DEFAULT_BETA).unwrap();
        assert!(r.k > 0.0);
        assert_abs_diff_eq!(r.k, 0.98 * r.i_ab, epsilon = 1e-9);
        assert!(key_rate(&Matrix4::identity(), 1.01).is_err());
        assert!(key_rate(&Matrix4::identity(), -0.1).is_err());
    }

    #[test]
    fn key_rate_is_affine_in_beta() {
        let cm = lossy_tmsv(2.5, 0.6, 0.05).cm_snu();
        let k0 = key_rate(&cm, 0.0).unwrap();
        for beta in [0.25, 0.5, 0.98, 1.0] {
            let r = key_rate(&cm, beta).unwrap();
            assert_eq!(r.k, beta * r.i_ab - r.s_ae);
            assert_eq!(r.i_ab, k0.i_ab);
            assert_eq!(r.s_ae, k0.s_ae);
        }
    }

    #[test]
    fn key_rate_monotone_in_transmissivity_for_pure_loss() {
        let ks: Vec<f64> = (1..=10)
            .map(|i| key_rate(&model_cm(3.0, 0.1 * i as f64, 0.0), DEFAULT_BETA).unwrap().k)
            .collect();
        assert!(ks.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{ks:?}");
    }

    #[test]
    fn unit_gain_sweep_equals_key_rate() {
        let state = lossy_tmsv(1.4374, 0.5, 0.2);
        let pts = keyrate_sweep(SweepSource::State(&state), &[1.0], DEFAULT_BETA, SweepMode::Analytic, None).unwrap();
        let direct = key_rate(&state.cm_snu(), DEFAULT_BETA).unwrap();
        assert_eq!(pts[0].outcome.as_ref().unwrap(), &direct);
    }

    #[test]
    fn noisy_source_sweep_changes_sign_once() {
        let state = gaussian::make_epr_from_squeezers(0.4, 2.75)
            .unwrap()
            .apply_loss(Mode::B, 0.9, 0.0)
            .unwrap();
        let bound = nla::gain_bound(&state).unwrap();
        let gains: Vec<f64> = (0..20).map(|i| 1.0 + (bound - 1.0) * i as f64 / 20.0).collect();
        let pts = keyrate_sweep(SweepSource::State(&state), &gains, DEFAULT_BETA, SweepMode::Analytic, None).unwrap();
        let ks: Vec<f64> = pts.iter().map(|p| p.outcome.as_ref().unwrap().k).collect();
        assert!(ks[0] < 0.0);
        let changes = ks.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count();
        assert_eq!(changes, 1, "{ks:?}");
    }

    #[test]
    fn sweep_collects_errors_past_the_bound() {
        let state = lossy_tmsv(1.4374, 0.5, 0.2);
        let bound = nla::gain_bound(&state).unwrap();
        let pts = keyrate_sweep(
            SweepSource::State(&state),
            &[1.1, bound + 0.1],
            DEFAULT_BETA,
            SweepMode::Analytic,
            None,
        )
        .unwrap();
        assert!(pts[0].outcome.is_ok());
        assert!(matches!(pts[1].outcome, Err(Error::GainExceedsBound { .. })));
        assert!(keyrate_sweep(SweepSource::State(&state), &[1.2, 1.1], DEFAULT_BETA, SweepMode::Analytic, None).is_err());
        assert!(keyrate_sweep(SweepSource::State(&state), &[1.2], DEFAULT_BETA, SweepMode::MonteCarlo, None).is_err());
    }

    #[test]
    fn monte_carlo_sweep_reports_intervals() {
        let state = lossy_tmsv(1.4374, 0.5, 0.2);
        let record = measurement::sample_shots(&state, 400_000, 11).unwrap();
        let cut = nla::choose_cutoff(&state, nla::DEFAULT_CUTOFF_SD).unwrap();
        let mc = MonteCarloOptions {
            alpha_c: cut.alpha_c,
            filter_seed: 5,
            n_boot: 200,
            boot_seed: 9,
            min_per_quadrature: criteria::MIN_SHOTS_PER_QUADRATURE,
        };
        let pts = keyrate_sweep(SweepSource::Record(&record), &[1.0, 1.1], DEFAULT_BETA, SweepMode::MonteCarlo, Some(&mc)).unwrap();
        for p in &pts {
            let r = p.outcome.as_ref().unwrap();
            let ci = r.k_interval.as_ref().unwrap();
            assert!(ci.low <= r.k && r.k <= ci.high && ci.standard_error > 0.0);
            let exact = key_rate(&nla::analytic_nla(&state, p.gain).unwrap().cm_snu(), DEFAULT_BETA).unwrap();
            assert!((r.k - exact.k).abs() < 5.0 * ci.standard_error + 1e-3, "{} vs {}", r.k, exact.k);
        }
    }

    proptest! {
        #[test]
        fn holevo_and_information_are_non_negative(
            v in 1.01f64..20.0,
            t in 0.01f64..1.0,
            n_th in 0.0f64..2.0,
        ) {
            let cm = lossy_tmsv(v, t, n_th).cm_snu();
            let r = key_rate(&cm, DEFAULT_BETA).unwrap();
            prop_assert!(r.i_ab >= 0.0);
            prop_assert!(r.s_ae >= 0.0);
            prop_assert!(r.k <= r.beta_rec * r.i_ab);
        }

        #[test]
        fn channel_fit_recovers_model(
            v in 1.05f64..20.0,
            t in 0.05f64..1.0,
            xi in 0.0f64..0.5,
        ) {
            let ch = effective_channel(&model_cm(v, t, xi)).unwrap();
            prop_assert!((ch.t_eff - t).abs() < 1e-8 * (1.0 + t));
            prop_assert!((ch.xi - xi).abs() < 1e-6);
            prop_assert!((ch.v_source - v).abs() < 1e-9 * v);
        }
    }
}
