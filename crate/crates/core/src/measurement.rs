//! Simulated measurement records: Alice homodynes alternating quadratures,
//! Bob heterodynes both quadratures at once.
//!
//! Bob's outcome pair `(bob_x, bob_p)` is in natural units and is distributed
//! as his marginal Q-function, with covariance `cm_B + I/2` and the state's
//! own cross-covariance to Alice. Alice's value is drawn from the exact
//! conditional Gaussian of her quadrature given Bob's pair.

use nalgebra::{Matrix2, Matrix4, RowVector2, Vector2, Vector4};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianState, Mode, VACUUM_VARIANCE};
use crate::rng::{self, Domain, SHARD_SIZE};

/// Default ceiling on the memory an in-memory record may occupy.
pub const DEFAULT_MEMORY_BUDGET: usize = 1 << 30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrature {
    #[default]
    X,
    P,
}

impl Quadrature {
    /// Alice's quadrature for a given shot index: even shots X, odd shots P.
    pub fn for_shot(index: usize) -> Self {
        if index % 2 == 0 {
            Quadrature::X
        } else {
            Quadrature::P
        }
    }

    /// Offset of this quadrature inside a single-mode block.
    pub fn index(self) -> usize {
        match self {
            Quadrature::X => 0,
            Quadrature::P => 1,
        }
    }

    pub fn to_byte(self) -> u8 {
        self.index() as u8
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Quadrature::X),
            1 => Some(Quadrature::P),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub alice_quad: Quadrature,
    pub alice_value: f64,
    pub bob_x: f64,
    pub bob_p: f64,
}

impl Shot {
    /// Bob's outcome pair in the component coordinates used by the filter.
    pub fn bob(&self) -> Vector2<f64> {
        Vector2::new(self.bob_x, self.bob_p)
    }
}

/// Unit convention of the stored values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convention {
    /// Vacuum quadrature variance 1/2.
    #[default]
    Natural,
}

impl Convention {
    pub fn tag(self) -> u8 {
        match self {
            Convention::Natural => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Convention::Natural),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub source: GaussianState,
    pub seed: u64,
    pub n_requested: usize,
    pub convention: Convention,
    /// Gain of the filter that produced this record, 1.0 if unfiltered.
    pub gain: f64,
    /// Truncation amplitude of that filter, 0.0 if unfiltered.
    pub alpha_c: f64,
    pub filter_seed: u64,
    /// Whether Bob's outcomes have been divided by `gain`.
    pub rescaled: bool,
}

impl RecordMeta {
    pub fn unfiltered(source: GaussianState, seed: u64, n_requested: usize) -> Self {
        Self {
            source,
            seed,
            n_requested,
            convention: Convention::Natural,
            gain: 1.0,
            alpha_c: 0.0,
            filter_seed: 0,
            rescaled: false,
        }
    }

    pub fn is_filtered(&self) -> bool {
        self.gain != 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub meta: RecordMeta,
    pub shots: Vec<Shot>,
}

impl MeasurementRecord {
    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }
}

/// Covariance of Bob's heterodyne outcome pair, `cm_B + I/2`.
pub fn heterodyne_outcome_covariance(state: &GaussianState) -> Matrix2<f64> {
    state.block(Mode::B) + Matrix2::identity() * VACUUM_VARIANCE
}

/// Covariance of the mode that is kept after heterodyning `measured_mode`.
pub fn conditional_cm_after_heterodyne(
    state: &GaussianState,
    measured_mode: Mode,
) -> Result<Matrix2<f64>> {
    let cm = state.cm();
    let kept = measured_mode.other();
    let (ko, mo) = (kept.offset(), measured_mode.offset());
    let kept_block = cm.fixed_view::<2, 2>(ko, ko).into_owned();
    let cross = cm.fixed_view::<2, 2>(ko, mo).into_owned();
    let meas = cm.fixed_view::<2, 2>(mo, mo).into_owned() + Matrix2::identity() * VACUUM_VARIANCE;
    let inv = meas.try_inverse().ok_or_else(|| {
        Error::Numeric(format!("singular conditioning block {meas:?}"))
    })?;
    let out = kept_block - cross * inv * cross.transpose();
    Ok((out + out.transpose()) * 0.5)
}

/// Precomputed linear map from three standard normals to one shot.
#[derive(Clone, Debug)]
struct ShotModel {
    mean_b: Vector2<f64>,
    chol_b: Matrix2<f64>,
    alice: [AliceConditional; 2],
}

#[derive(Clone, Copy, Debug)]
struct AliceConditional {
    mean: f64,
    gain: RowVector2<f64>,
    sd: f64,
}

impl ShotModel {
    fn new(state: &GaussianState) -> Result<Self> {
        let cm: &Matrix4<f64> = state.cm();
        let mean: &Vector4<f64> = state.mean();
        let s = heterodyne_outcome_covariance(state);
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::Numeric(format!("outcome covariance not positive definite: {s:?}")))?;
        let s_inv = chol.inverse();
        let alice = [0usize, 1].map(|q| {
            let c = RowVector2::new(cm[(q, 2)], cm[(q, 3)]);
            let gain = c * s_inv;
            let var = cm[(q, q)] - (gain * c.transpose())[0];
            AliceConditional {
                mean: mean[q],
                gain,
                sd: var.max(0.0).sqrt(),
            }
        });
        Ok(Self {
            mean_b: Vector2::new(mean[2], mean[3]),
            chol_b: chol.l(),
            alice,
        })
    }

    fn shot(&self, index: usize, z: [f64; 3]) -> Shot {
        let db = self.chol_b * Vector2::new(z[0], z[1]);
        let b = self.mean_b + db;
        let quad = Quadrature::for_shot(index);
        let a = &self.alice[quad.index()];
        let alice_value = a.mean + (a.gain * db)[0] + a.sd * z[2];
        Shot {
            alice_quad: quad,
            alice_value,
            bob_x: b[0],
            bob_p: b[1],
        }
    }

    fn fill_shard(&self, seed: u64, shard: usize, first_index: usize, out: &mut [Shot]) {
        let mut rng = rng::stream(seed, Domain::Sampling, shard as u64);
        for (k, slot) in out.iter_mut().enumerate() {
            let z = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            *slot = self.shot(first_index + k, z);
        }
    }
}

/// Bytes an in-memory record of `n` shots occupies.
pub fn record_bytes(n: usize) -> usize {
    n.saturating_mul(std::mem::size_of::<Shot>())
}

/// Draws `n` shots in memory, refusing if they exceed
/// [`DEFAULT_MEMORY_BUDGET`].
pub fn sample_shots(state: &GaussianState, n: usize, seed: u64) -> Result<MeasurementRecord> {
    sample_shots_with_budget(state, n, seed, DEFAULT_MEMORY_BUDGET)
}

pub fn sample_shots_with_budget(
    state: &GaussianState,
    n: usize,
    seed: u64,
    budget: usize,
) -> Result<MeasurementRecord> {
    if n == 0 {
        return Err(Error::InvalidParameter("shot count must be at least 1".into()));
    }
    let bytes = record_bytes(n);
    if bytes > budget {
        return Err(Error::MemoryBudget {
            requested: n,
            bytes,
            budget,
        });
    }
    let model = ShotModel::new(state)?;
    let mut shots = vec![Shot::default(); n];
    shots
        .par_chunks_mut(SHARD_SIZE)
        .enumerate()
        .for_each(|(shard, chunk)| model.fill_shard(seed, shard, shard * SHARD_SIZE, chunk));
    Ok(MeasurementRecord {
        meta: RecordMeta::unfiltered(state.clone(), seed, n),
        shots,
    })
}

/// Shard-by-shard generator for records too large to hold in memory. The
/// concatenated output is identical to [`sample_shots`] for the same inputs.
#[derive(Clone, Debug)]
pub struct ShotSampler {
    model: ShotModel,
    meta: RecordMeta,
    next_shard: usize,
}

impl ShotSampler {
    pub fn new(state: &GaussianState, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("shot count must be at least 1".into()));
        }
        Ok(Self {
            model: ShotModel::new(state)?,
            meta: RecordMeta::unfiltered(state.clone(), seed, n),
            next_shard: 0,
        })
    }

    pub fn meta(&self) -> &RecordMeta {
        &self.meta
    }

    pub fn shard_count(&self) -> usize {
        rng::shard_count(self.meta.n_requested)
    }

    /// Generates one shard independently of any other.
    pub fn shard(&self, shard: usize) -> Vec<Shot> {
        let range = rng::shard_range(self.meta.n_requested, shard);
        let mut out = vec![Shot::default(); range.len()];
        self.model
            .fill_shard(self.meta.seed, shard, range.start, &mut out);
        out
    }

    /// Generates up to `count` consecutive shards in parallel, concatenated.
    pub fn next_batch(&mut self, count: usize) -> Option<Vec<Shot>> {
        let end = (self.next_shard + count.max(1)).min(self.shard_count());
        if self.next_shard >= end {
            return None;
        }
        let parts: Vec<Vec<Shot>> = (self.next_shard..end)
            .into_par_iter()
            .map(|s| self.shard(s))
            .collect();
        self.next_shard = end;
        Some(parts.concat())
    }
}

impl Iterator for ShotSampler {
    type Item = Vec<Shot>;

    fn next(&mut self) -> Option<Vec<Shot>> {
        self.next_batch(1)
    }
}
