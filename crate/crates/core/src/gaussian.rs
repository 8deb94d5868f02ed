//! Two-mode Gaussian states in phase space.
//!
//! Covariance matrices are ordered `(x_A, p_A, x_B, p_B)` and expressed in
//! natural units, where the vacuum quadrature variance is 1/2. Shot-noise
//! units (vacuum variance 1) appear only at reporting boundaries, via
//! [`GaussianState::cm_snu`] and [`to_snu`] / [`from_snu`].

use nalgebra::{Matrix2, Matrix4, SymmetricEigen, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quadrature variance of the vacuum in natural units.
pub const VACUUM_VARIANCE: f64 = 0.5;

/// Slack allowed below 1/2 for a symplectic eigenvalue to count as physical.
pub const PHYSICALITY_TOL: f64 = 1e-9;

const SYMMETRY_TOL: f64 = 1e-12;

/// Largest squeezing accepted by [`make_tmsv`].
pub const MAX_SQUEEZING: f64 = 10.0;

/// One of the two optical modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    A,
    B,
}

impl Mode {
    /// Row offset of this mode's quadratures in the 4x4 covariance matrix.
    pub fn offset(self) -> usize {
        match self {
            Mode::A => 0,
            Mode::B => 2,
        }
    }

    pub fn other(self) -> Mode {
        match self {
            Mode::A => Mode::B,
            Mode::B => Mode::A,
        }
    }
}

/// The symplectic form `⊕ [[0, 1], [-1, 0]]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct SymplecticForm;

impl SymplecticForm {
    pub fn single_mode() -> Matrix2<f64> {
        Matrix2::new(0.0, 1.0, -1.0, 0.0)
    }

    pub fn two_mode() -> Matrix4<f64> {
        let mut omega = Matrix4::zeros();
        omega[(0, 1)] = 1.0;
        omega[(1, 0)] = -1.0;
        omega[(2, 3)] = 1.0;
        omega[(3, 2)] = -1.0;
        omega
    }
}

/// A two-mode Gaussian state: covariance matrix, first moments and a
/// free-text provenance label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    cm: Matrix4<f64>,
    mean: Vector4<f64>,
    label: String,
}

impl GaussianState {
    /// Validates `cm` and builds a state. The matrix is symmetrised after the
    /// symmetry check so downstream code sees an exactly symmetric matrix.
    pub fn new(cm: Matrix4<f64>, mean: Vector4<f64>, label: impl Into<String>) -> Result<Self> {
        if !cm.iter().chain(mean.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite covariance or mean entry".into()));
        }
        let cm = check_symmetric(&cm)?;
        check_physical(&cm)?;
        Ok(Self {
            cm,
            mean,
            label: label.into(),
        })
    }

    pub fn from_cm(cm: Matrix4<f64>, label: impl Into<String>) -> Result<Self> {
        Self::new(cm, Vector4::zeros(), label)
    }

    /// Builds a state from a covariance matrix given in shot-noise units.
    pub fn from_cm_snu(cm_snu: Matrix4<f64>, label: impl Into<String>) -> Result<Self> {
        Self::from_cm(from_snu(&cm_snu), label)
    }

    pub fn vacuum() -> Self {
        Self {
            cm: Matrix4::identity() * VACUUM_VARIANCE,
            mean: Vector4::zeros(),
            label: "vacuum".into(),
        }
    }

    pub fn cm(&self) -> &Matrix4<f64> {
        &self.cm
    }

    pub fn cm_snu(&self) -> Matrix4<f64> {
        to_snu(&self.cm)
    }

    pub fn mean(&self) -> &Vector4<f64> {
        &self.mean
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_mean(mut self, mean: Vector4<f64>) -> Self {
        self.mean = mean;
        self
    }

    /// Local 2x2 covariance block of `mode`.
    pub fn block(&self, mode: Mode) -> Matrix2<f64> {
        block(&self.cm, mode)
    }

    /// Cross-correlation block, rows from mode A and columns from mode B.
    pub fn cross(&self) -> Matrix2<f64> {
        self.cm.fixed_view::<2, 2>(0, 2).into_owned()
    }

    pub fn apply_loss(&self, mode: Mode, transmissivity: f64, thermal_photons: f64) -> Result<Self> {
        apply_loss(self, mode, transmissivity, thermal_photons)
    }

    pub fn purity(&self) -> Result<f64> {
        purity(self)
    }

    pub fn symplectic_eigenvalues(&self) -> Result<[f64; 2]> {
        symplectic_eigenvalues(&self.cm)
    }

    pub fn entropy(&self) -> Result<f64> {
        von_neumann_entropy(&self.cm)
    }
}

pub fn to_snu(cm: &Matrix4<f64>) -> Matrix4<f64> {
    cm / VACUUM_VARIANCE
}

pub fn from_snu(cm_snu: &Matrix4<f64>) -> Matrix4<f64> {
    cm_snu * VACUUM_VARIANCE
}

pub fn block(cm: &Matrix4<f64>, mode: Mode) -> Matrix2<f64> {
    let o = mode.offset();
    cm.fixed_view::<2, 2>(o, o).into_owned()
}

/// Two-mode squeezed vacuum with squeezing `r`, i.e. the EPR state with
/// `χ = tanh r`.
pub fn make_tmsv(r: f64) -> Result<GaussianState> {
    if !(0.0..=MAX_SQUEEZING).contains(&r) {
        return Err(Error::InvalidParameter(format!(
            "squeezing r = {r} outside [0, {MAX_SQUEEZING}]"
        )));
    }
    let c = (2.0 * r).cosh() * VACUUM_VARIANCE;
    let s = (2.0 * r).sinh() * VACUUM_VARIANCE;
    #[rustfmt::skip]
    let cm = Matrix4::new(
        c,   0.0, s,   0.0,
        0.0, c,   0.0, -s,
        s,   0.0, c,   0.0,
        0.0, -s,  0.0, c,
    );
    // Physical by construction; at large r the numeric check itself loses
    // the e^{-2r} eigenvalue to cancellation, so it is skipped here.
    Ok(GaussianState {
        cm,
        mean: Vector4::zeros(),
        label: format!("tmsv(r={r})"),
    })
}

/// Squeezing parameter whose TMSV has marginal variance `v_snu` (SNU).
pub fn tmsv_squeezing_for_variance(v_snu: f64) -> Result<f64> {
    if !(v_snu >= 1.0) || !v_snu.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "TMSV marginal variance {v_snu} must be finite and >= 1 SNU"
        )));
    }
    Ok(0.5 * v_snu.acosh())
}

/// EPR state produced by two squeezed beams, locked in quadrature and mixed
/// on a 50:50 beam splitter. Variances are in shot-noise units. The first
/// input is squeezed in `p` and the second in `x`, which puts the output in
/// the same phase convention as [`make_tmsv`].
pub fn make_epr_from_squeezers(v_sq: f64, v_anti: f64) -> Result<GaussianState> {
    if !(v_sq > 0.0 && v_sq <= 1.0 && v_anti >= 1.0 && v_anti.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "squeezer variances must satisfy 0 < v_sq <= 1 <= v_anti (got {v_sq}, {v_anti})"
        )));
    }
    if v_sq * v_anti < 1.0 - 1e-12 {
        return Err(Error::Unphysical(format!(
            "squeezer violates the uncertainty relation: v_sq * v_anti = {}",
            v_sq * v_anti
        )));
    }
    let var = (v_sq + v_anti) / 4.0;
    let cov = (v_anti - v_sq) / 4.0;
    #[rustfmt::skip]
    let cm = Matrix4::new(
        var, 0.0,  cov, 0.0,
        0.0, var,  0.0, -cov,
        cov, 0.0,  var, 0.0,
        0.0, -cov, 0.0, var,
    );
    GaussianState::from_cm(cm, format!("squeezers(v_sq={v_sq}, v_anti={v_anti})"))
}

/// Thermal-loss channel with transmissivity `t` acting on `mode`.
pub fn apply_loss(
    state: &GaussianState,
    mode: Mode,
    t: f64,
    thermal_photons: f64,
) -> Result<GaussianState> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!(
            "transmissivity {t} outside [0, 1]"
        )));
    }
    if !(thermal_photons >= 0.0) || !thermal_photons.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "thermal photon number {thermal_photons} must be finite and >= 0"
        )));
    }
    let mut scale = Vector4::repeat(1.0);
    let o = mode.offset();
    scale[o] = t.sqrt();
    scale[o + 1] = t.sqrt();
    let mut cm = state.cm.component_mul(&(scale * scale.transpose()));
    let added = (1.0 - t) * (thermal_photons + VACUUM_VARIANCE);
    cm[(o, o)] += added;
    cm[(o + 1, o + 1)] += added;
    let mean = state.mean.component_mul(&scale);
    let label = format!("{} -> loss({mode:?}, T={t}, n_th={thermal_photons})", state.label);
    GaussianState::new(cm, mean, label)
}

/// `Tr ρ²` of a two-mode Gaussian state.
pub fn purity(state: &GaussianState) -> Result<f64> {
    two_mode_purity(&state.cm)
}

pub fn two_mode_purity(cm: &Matrix4<f64>) -> Result<f64> {
    let det = cm.determinant();
    if !(det > 0.0) {
        return Err(Error::Unphysical(format!(
            "covariance determinant {det} is not positive"
        )));
    }
    Ok(1.0 / (4.0 * det.sqrt()))
}

/// Purity of a single-mode marginal block.
pub fn single_mode_purity(block: &Matrix2<f64>) -> Result<f64> {
    let det = block.determinant();
    if !(det > 0.0) {
        return Err(Error::Unphysical(format!(
            "covariance determinant {det} is not positive"
        )));
    }
    Ok(1.0 / (2.0 * det.sqrt()))
}

fn check_symmetric(cm: &Matrix4<f64>) -> Result<Matrix4<f64>> {
    let scale = cm.amax().max(f64::MIN_POSITIVE);
    let asym = (cm - cm.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::Unphysical(format!(
            "covariance matrix is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    Ok((cm + cm.transpose()) * 0.5)
}

/// Checks positive-definite local blocks and the uncertainty relation
/// `cm + (i/2)Ω ⪰ 0`, phrased as every symplectic eigenvalue being at least 1/2.
pub fn check_physical(cm: &Matrix4<f64>) -> Result<()> {
    for mode in [Mode::A, Mode::B] {
        let b = block(cm, mode);
        if !(b[(0, 0)] > 0.0 && b.determinant() > 0.0) {
            return Err(Error::Unphysical(format!(
                "local block of mode {mode:?} is not positive definite"
            )));
        }
    }
    let nu = symplectic_eigenvalues(cm)?;
    if nu[1] < VACUUM_VARIANCE - PHYSICALITY_TOL {
        return Err(Error::Unphysical(format!(
            "symplectic eigenvalue {:.12} below 1/2",
            nu[1]
        )));
    }
    Ok(())
}

fn symmetric_eigen(m: Matrix4<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::U4>> {
    SymmetricEigen::try_new(m, 1e-15, 10_000)
        .ok_or_else(|| Error::Numeric(format!("eigensolver did not converge for {what}: {m:?}")))
}

fn sqrt_and_inv_sqrt(cm: &Matrix4<f64>) -> Result<(Matrix4<f64>, Matrix4<f64>)> {
    let eig = symmetric_eigen(*cm, "covariance square root")?;
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Unphysical(format!(
            "covariance matrix is not positive definite (eigenvalues {:?})",
            eig.eigenvalues.as_slice()
        )));
    }
    let q = &eig.eigenvectors;
    let root = q * Matrix4::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * q.transpose();
    let inv_root =
        q * Matrix4::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * q.transpose();
    Ok((root, inv_root))
}

/// Symplectic eigenvalues of a positive-definite 4x4 covariance matrix,
/// sorted descending.
///
/// They are the moduli of the eigenvalues of `iΩσ`. `σ^{1/2} Ω σ^{1/2}` is
/// similar to `Ωσ` and antisymmetric, so its Gram matrix has eigenvalues
/// `ν₁², ν₁², ν₂², ν₂²` and only symmetric eigensolves are needed.
pub fn symplectic_eigenvalues(cm: &Matrix4<f64>) -> Result<[f64; 2]> {
    let (root, _) = sqrt_and_inv_sqrt(cm)?;
    let n = root * SymplecticForm::two_mode() * root;
    let eig = symmetric_eigen(n.transpose() * n, "symplectic spectrum")?;
    let mut sq: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    sq.sort_by(|a, b| b.total_cmp(a));
    Ok([
        (0.5 * (sq[0] + sq[1])).sqrt(),
        (0.5 * (sq[2] + sq[3])).sqrt(),
    ])
}

/// `g(x) = (x+1) log₂(x+1) − x log₂ x`, the entropy of a thermal mode with
/// mean photon number `x`.
pub fn entropy_function(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (x + 1.0) * (x + 1.0).log2() - x * x.log2()
    }
}

/// Entropy in bits contributed by a symplectic eigenvalue in natural units.
pub fn entropy_from_symplectic(nu: f64) -> Result<f64> {
    if nu < VACUUM_VARIANCE - PHYSICALITY_TOL {
        return Err(Error::Unphysical(format!(
            "symplectic eigenvalue {nu} below 1/2"
        )));
    }
    Ok(entropy_function(nu - VACUUM_VARIANCE))
}

/// Von Neumann entropy in bits of a two-mode Gaussian state.
pub fn von_neumann_entropy(cm: &Matrix4<f64>) -> Result<f64> {
    symplectic_eigenvalues(cm)?
        .iter()
        .map(|&nu| entropy_from_symplectic(nu))
        .sum()
}

/// Von Neumann entropy in bits of a single-mode Gaussian state.
pub fn single_mode_entropy(block: &Matrix2<f64>) -> Result<f64> {
    let det = block.determinant();
    if !(det > 0.0) {
        return Err(Error::Unphysical(format!(
            "covariance determinant {det} is not positive"
        )));
    }
    entropy_from_symplectic(det.sqrt())
}

/// Williamson normal form `σ = S · diag(ν₁, ν₁, ν₂, ν₂) · Sᵀ` with `S`
/// symplectic.
#[derive(Clone, Debug)]
pub struct Williamson {
    pub nu: [f64; 2],
    pub symplectic: Matrix4<f64>,
}

impl Williamson {
    pub fn reconstruct(&self, nu: [f64; 2]) -> Matrix4<f64> {
        let d = Matrix4::from_diagonal(&Vector4::new(nu[0], nu[0], nu[1], nu[1]));
        self.symplectic * d * self.symplectic.transpose()
    }
}

/// Computes the Williamson decomposition of a positive-definite covariance
/// matrix.
///
/// With `M = σ^{-1/2} Ω σ^{-1/2}`, an orthogonal `O` bringing `M` to the
/// canonical form `⊕ ν_k⁻¹ [[0, 1], [-1, 0]]` gives `S = σ^{1/2} O D^{-1/2}`.
/// The columns of `O` are built pairwise as `(ν M u, u)` for unit vectors `u`
/// drawn from the invariant planes of `M`.
pub fn williamson(cm: &Matrix4<f64>) -> Result<Williamson> {
    let (root, inv_root) = sqrt_and_inv_sqrt(cm)?;
    let m = inv_root * SymplecticForm::two_mode() * inv_root;
    let gram = m.transpose() * m;
    let eig = symmetric_eigen(gram, "Williamson decomposition")?;
    // Ascending eigenvalues of MᵀM are 1/ν² for descending ν.
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut basis: Vec<Vector4<f64>> = Vec::with_capacity(4);
    let mut nu = [0.0; 2];
    for (k, nu_k) in nu.iter_mut().enumerate() {
        // First pair takes the leading eigenvector; the second takes whichever
        // remaining eigenvector has the largest component outside that plane.
        let candidates = if k == 0 { &order[..1] } else { &order[..] };
        let mut best: Option<Vector4<f64>> = None;
        for &idx in candidates {
            let mut v: Vector4<f64> = eig.eigenvectors.column(idx).into_owned();
            for b in &basis {
                v -= *b * b.dot(&v);
            }
            if best.map_or(true, |bv| v.norm() > bv.norm()) {
                best = Some(v);
            }
        }
        let u = best
            .filter(|v| v.norm() > 1e-8)
            .ok_or_else(|| Error::Numeric("Williamson basis became degenerate".into()))?
            .normalize();
        let mu = m * u;
        let inv_nu = mu.norm();
        if !(inv_nu > 0.0) {
            return Err(Error::Numeric("vanishing symplectic eigenvalue".into()));
        }
        *nu_k = 1.0 / inv_nu;
        let w = mu / inv_nu;
        basis.push(w);
        basis.push(u);
    }
    let o = Matrix4::from_columns(&basis);
    let d_inv_sqrt = Matrix4::from_diagonal(&Vector4::new(
        nu[0].powf(-0.5),
        nu[0].powf(-0.5),
        nu[1].powf(-0.5),
        nu[1].powf(-0.5),
    ));
    Ok(Williamson {
        nu,
        symplectic: root * o * d_inv_sqrt,
    })
}

/// Result of projecting an estimated covariance matrix onto the physical set.
#[derive(Clone, Debug)]
pub struct Projection {
    pub cm: Matrix4<f64>,
    /// Frobenius distance between the input and the projected matrix.
    pub distance: f64,
    pub clipped: bool,
}

/// Clips the symplectic spectrum of `cm` at 1/2. Physical matrices come back
/// unchanged with zero distance.
pub fn project_physical(cm: &Matrix4<f64>) -> Result<Projection> {
    let cm = check_symmetric(cm)?;
    let w = williamson(&cm)?;
    if w.nu.iter().all(|&v| v >= VACUUM_VARIANCE - PHYSICALITY_TOL) {
        return Ok(Projection {
            cm,
            distance: 0.0,
            clipped: false,
        });
    }
    let projected = w.reconstruct(w.nu.map(|v| v.max(VACUUM_VARIANCE)));
    let projected = (projected + projected.transpose()) * 0.5;
    let distance = (projected - cm).norm();
    log::debug!(
        "projected covariance onto physical set: nu = {:?}, distance = {distance:.3e}",
        w.nu
    );
    Ok(Projection {
        cm: projected,
        distance,
        clipped: true,
    })
}
