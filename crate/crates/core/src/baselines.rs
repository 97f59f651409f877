//! Comparison policies: disjoint-model LinUCB, strict top-1 score
//! following, and uniform random.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kboot::{select_arm, FilterableBandit, RewardEstimate};
use crate::scalar::Real;

/// LinUCB hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinUcbConfig {
    /// Exploration weight on the confidence radius.
    pub alpha_ucb: f64,
    /// Seed for the policy's private random stream.
    pub seed: u64,
}

impl Default for LinUcbConfig {
    fn default() -> Self {
        LinUcbConfig {
            alpha_ucb: 10.0,
            seed: 0,
        }
    }
}

/// One arm's ridge state: the inverse design matrix (A = I + Σxxᵀ,
/// maintained as A⁻¹ row-major) and the response vector b = Σrx.
#[derive(Debug, Clone)]
struct ArmModel<R> {
    a_inv: Vec<R>,
    b: Vec<R>,
}

impl<R: Real> ArmModel<R> {
    fn identity(dim: usize) -> Self {
        let mut a_inv = vec![R::zero(); dim * dim];
        for i in 0..dim {
            a_inv[i * dim + i] = R::one();
        }
        ArmModel {
            a_inv,
            b: vec![R::zero(); dim],
        }
    }

    fn mul(&self, x: &[R]) -> Vec<R> {
        let dim = x.len();
        (0..dim)
            .map(|i| {
                let row = &self.a_inv[i * dim..(i + 1) * dim];
                row.iter()
                    .zip(x)
                    .fold(R::zero(), |acc, (&a, &xj)| acc + a * xj)
            })
            .collect()
    }
}

/// Per-arm linear UCB with disjoint models: each arm keeps its own ridge
/// regression (λ = 1) of rewards on contexts and is scored by
/// θᵀx + α·√(xᵀA⁻¹x).
#[derive(Debug, Clone)]
pub struct LinUcb<R> {
    config: LinUcbConfig,
    dim: usize,
    models: Vec<ArmModel<R>>,
    rng: ChaCha8Rng,
}

impl<R: Real> LinUcb<R> {
    /// Creates a policy with identity design matrices. The random stream
    /// (used only for tie-breaking) is stream 1 of a ChaCha8 generator
    /// seeded with `config.seed`.
    ///
    /// # Errors
    /// `InvalidParameter` for zero arms, zero dimension, or a nonpositive
    /// exploration weight.
    pub fn new(arms: usize, dim: usize, config: LinUcbConfig) -> Result<Self> {
        if arms == 0 {
            return Err(Error::invalid("policy needs at least one arm"));
        }
        if dim == 0 {
            return Err(Error::invalid("context dimension must be at least 1"));
        }
        if config.alpha_ucb.is_nan() || config.alpha_ucb <= 0.0 {
            return Err(Error::invalid(format!(
                "exploration weight must be positive, got {}",
                config.alpha_ucb
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(LinUcb {
            config,
            dim,
            models: (0..arms).map(|_| ArmModel::identity(dim)).collect(),
            rng,
        })
    }

    pub fn config(&self) -> &LinUcbConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_dim(&self, x: &[R]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn model(&self, arm: usize) -> Result<&ArmModel<R>> {
        self.models.get(arm).ok_or(Error::IndexOutOfRange {
            index: arm,
            len: self.models.len(),
        })
    }

    /// Ridge estimate θ = A⁻¹b for one arm.
    pub fn theta(&self, arm: usize) -> Result<Vec<R>> {
        let model = self.model(arm)?;
        Ok(model.mul(&model.b))
    }

    /// Copy of one arm's inverse design matrix, as rows.
    pub fn design_inverse(&self, arm: usize) -> Result<Vec<Vec<R>>> {
        let model = self.model(arm)?;
        Ok((0..self.dim)
            .map(|i| model.a_inv[i * self.dim..(i + 1) * self.dim].to_vec())
            .collect())
    }

    fn ucb_for(&self, arm: usize, x: &[R]) -> R {
        let model = &self.models[arm];
        let v = model.mul(x);
        let mut mean = R::zero();
        let mut quad = R::zero();
        for i in 0..self.dim {
            mean = mean + v[i] * model.b[i];
            quad = quad + v[i] * x[i];
        }
        mean + R::of(self.config.alpha_ucb) * quad.max(R::zero()).sqrt()
    }

    /// Upper confidence bounds for every arm at the query context.
    pub fn ucb_values(&self, x: &[R]) -> Result<Vec<R>> {
        self.check_dim(x)?;
        Ok((0..self.models.len()).map(|arm| self.ucb_for(arm, x)).collect())
    }

    /// One full selection step over all arms.
    pub fn choose(&mut self, x: &[R]) -> Result<usize> {
        self.choose_masked(x, None)
    }
}

impl<R: Real> FilterableBandit<R> for LinUcb<R> {
    fn arms(&self) -> usize {
        self.models.len()
    }

    fn choose_masked(&mut self, query: &[R], mask: Option<&[bool]>) -> Result<usize> {
        self.check_dim(query)?;
        if let Some(m) = mask {
            if m.len() != self.models.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.models.len(),
                    got: m.len(),
                });
            }
        }
        let estimates: Vec<RewardEstimate<R>> = (0..self.models.len())
            .filter(|&arm| mask.is_none_or(|m| m[arm]))
            .map(|arm| RewardEstimate {
                arm,
                value: self.ucb_for(arm, query),
            })
            .collect();
        if estimates.is_empty() {
            return Err(Error::EmptyInput("mask excludes every arm"));
        }
        select_arm(&estimates, &mut self.rng)
    }

    fn update(&mut self, arm: usize, query: &[R], reward: R) -> Result<()> {
        self.check_dim(query)?;
        let len = self.models.len();
        let dim = self.dim;
        let model = self
            .models
            .get_mut(arm)
            .ok_or(Error::IndexOutOfRange { index: arm, len })?;
        // Rank-1 inverse update for A += xxᵀ:
        // A⁻¹ -= (A⁻¹x)(A⁻¹x)ᵀ / (1 + xᵀA⁻¹x).
        let v = model.mul(query);
        let denom = v
            .iter()
            .zip(query)
            .fold(R::one(), |acc, (&vi, &qi)| acc + vi * qi);
        for i in 0..dim {
            for j in 0..dim {
                model.a_inv[i * dim + j] = model.a_inv[i * dim + j] - v[i] * v[j] / denom;
            }
        }
        for (bi, &qi) in model.b.iter_mut().zip(query) {
            *bi = *bi + reward * qi;
        }
        Ok(())
    }
}

/// Pulls the arm with the highest score, ties broken uniformly.
///
/// # Errors
/// `EmptyInput` for no scores.
pub fn top1_policy<R: Real>(scores: &[R], rng: &mut impl Rng) -> Result<usize> {
    let estimates: Vec<RewardEstimate<R>> = scores
        .iter()
        .enumerate()
        .map(|(arm, &value)| RewardEstimate { arm, value })
        .collect();
    select_arm(&estimates, rng)
}

/// Uniform random arm.
///
/// # Errors
/// `InvalidParameter` when there are no arms.
pub fn uniform_policy(arms: usize, rng: &mut impl Rng) -> Result<usize> {
    if arms == 0 {
        return Err(Error::invalid("policy needs at least one arm"));
    }
    Ok(rng.random_range(0..arms))
}
