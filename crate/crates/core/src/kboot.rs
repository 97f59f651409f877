//! Bootstrap Thompson sampling over k-NN neighborhoods.
//!
//! Per round, each arm's reward is estimated from its own sample pool: the
//! pool's nearest neighbors are narrowed to an analytically sized
//! "influential" subset, two pseudo-samples with rewards 0 and 1 are added
//! at a randomly chosen member's context, the subset is bootstrap-resampled
//! with replacement, and a Nadaraya-Watson kernel estimate over the
//! resample's nearest members produces the sampled reward. Acting greedily
//! on these noisy estimates is the exploration mechanism; cold arms draw
//! uniform estimates on [0, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::mathfn::{reg_inc_beta, rms_bandwidth};
use crate::neighbors::{query_top, ArmPool, SampleRecord};
use crate::scalar::Real;

/// Distance floor handed to the bandwidth rule when all neighbors coincide
/// with the query.
const BANDWIDTH_FLOOR: f64 = 1e-6;

/// Hyperparameters for the bandit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KBootConfig {
    /// Number of nearest neighbors K used by the kernel estimate.
    pub k: usize,
    /// Approximation tolerance ε for sizing the influential subset.
    pub epsilon: f64,
    /// Seed for the policy's private random stream.
    pub seed: u64,
}

impl Default for KBootConfig {
    fn default() -> Self {
        KBootConfig {
            k: 20,
            epsilon: 0.01,
            seed: 0,
        }
    }
}

/// A sampled reward estimate for one arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardEstimate<R> {
    pub arm: usize,
    pub value: R,
}

/// Smallest k′ in [K, N_m] such that a size-K′ prefix of the distance-sorted
/// pool covers the K nearest neighbors of a bootstrap resample with
/// probability above 1 − ε.
///
/// The resample positions are uniform on the pool, so the K-th nearest
/// member of a size-N_m resample lands within the original top k′ with
/// probability I_{k′/N_m}(K, N_m − K + 1) (the K-th order statistic of N_m
/// uniform draws). The smallest k′ pushing that above 1 − ε is located by
/// binary search; the result always lies in [K, N_m] because the full pool
/// covers every resample.
///
/// # Errors
/// `InvalidParameter` unless N_m > K ≥ 1 and 0 < ε < 1.
pub fn influential_size(n_m: usize, k: usize, epsilon: f64) -> Result<usize> {
    if k < 1 {
        return Err(Error::invalid("neighbor count K must be at least 1"));
    }
    if n_m <= k {
        return Err(Error::invalid(format!(
            "influential subset needs a pool larger than K (N_m={n_m}, K={k})"
        )));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!(
            "tolerance must lie strictly inside (0,1), got {epsilon}"
        )));
    }
    let n = n_m as f64;
    let a = k as f64;
    let b = (n_m - k + 1) as f64;
    let covered = |kp: usize| -> Result<bool> {
        Ok(reg_inc_beta(a, b, kp as f64 / n)? > 1.0 - epsilon)
    };
    let mut lo = k;
    let mut hi = n_m;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if covered(mid)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(lo)
}

/// Index of the maximum estimate; exact ties are broken uniformly at random.
///
/// # Errors
/// `EmptyInput` when no estimates are given.
pub fn select_arm<R: Real>(
    estimates: &[RewardEstimate<R>],
    rng: &mut impl Rng,
) -> Result<usize> {
    if estimates.is_empty() {
        return Err(Error::EmptyInput("arm selection over no estimates"));
    }
    let mut best = estimates[0].value;
    for e in &estimates[1..] {
        if e.value > best {
            best = e.value;
        }
    }
    assert!(
        best.is_finite(),
        "non-finite reward estimate in arm selection"
    );
    let tied: Vec<usize> = estimates
        .iter()
        .filter(|e| e.value == best)
        .map(|e| e.arm)
        .collect();
    if tied.len() == 1 {
        Ok(tied[0])
    } else {
        Ok(tied[rng.random_range(0..tied.len())])
    }
}

/// A bandit whose per-arm reward models are independent, so any subset of
/// arms can be scored without touching the others. This is the contract the
/// eligibility controller relies on.
pub trait FilterableBandit<R: Real> {
    /// Number of arms.
    fn arms(&self) -> usize;

    /// Samples estimates for the unmasked arms and returns the argmax arm,
    /// ties broken uniformly. `None` means every arm is allowed; the mask
    /// must contain at least one `true` entry otherwise.
    fn choose_masked(&mut self, query: &[R], mask: Option<&[bool]>) -> Result<usize>;

    /// Records the observed reward for `arm`.
    fn update(&mut self, arm: usize, query: &[R], reward: R) -> Result<()>;
}

/// The bandit state: one sample pool per arm plus a seeded random stream.
#[derive(Debug, Clone)]
pub struct KBoot<R> {
    config: KBootConfig,
    pools: Vec<ArmPool<R>>,
    rng: ChaCha8Rng,
}

impl<R: Real> KBoot<R> {
    /// Creates a bandit with `arms` empty pools.
    ///
    /// The private random stream is stream 1 of a ChaCha8 generator seeded
    /// with `config.seed` (stream 0 is reserved for environments so a
    /// shared seed never aliases the two).
    ///
    /// # Errors
    /// `InvalidParameter` for zero arms, K = 0, or ε outside (0, 1).
    pub fn new(arms: usize, config: KBootConfig) -> Result<Self> {
        if arms == 0 {
            return Err(Error::invalid("bandit needs at least one arm"));
        }
        if config.k == 0 {
            return Err(Error::invalid("neighbor count K must be at least 1"));
        }
        if !(config.epsilon > 0.0 && config.epsilon < 1.0) {
            return Err(Error::invalid(format!(
                "tolerance must lie strictly inside (0,1), got {}",
                config.epsilon
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(KBoot {
            config,
            pools: (0..arms).map(|_| ArmPool::new()).collect(),
            rng,
        })
    }

    pub fn config(&self) -> &KBootConfig {
        &self.config
    }

    /// The sample pool of one arm.
    pub fn pool(&self, arm: usize) -> Result<&ArmPool<R>> {
        self.pools.get(arm).ok_or(Error::IndexOutOfRange {
            index: arm,
            len: self.pools.len(),
        })
    }

    /// Draws one reward estimate for `arm` at the query context.
    ///
    /// Cold arms (empty pool) draw uniform on [0, 1]. Warm arms run the
    /// bootstrap: influential subset, pseudo-samples, with-replacement
    /// resample, kernel estimate over the resample's min(K, |resample|)
    /// nearest members with a per-query bandwidth from the rule of thumb.
    ///
    /// Random draws consume the bandit's stream in a fixed order (subset
    /// member, then resample positions), so repeated runs with the same
    /// seed are bit-identical.
    pub fn sample_arm_reward(&mut self, arm: usize, query: &[R]) -> Result<RewardEstimate<R>> {
        let n_m = self.pool(arm)?.len();
        if n_m == 0 {
            let value = R::of(self.rng.random::<f64>());
            return Ok(RewardEstimate { arm, value });
        }

        let subset_size = if n_m > self.config.k {
            influential_size(n_m, self.config.k, self.config.epsilon)?
        } else {
            n_m
        };
        let pool = &self.pools[arm];
        let nearest = query_top(pool, query, subset_size)?;

        // Pseudo-samples (x⋆, 0) and (x⋆, 1) share the context of a random
        // member of the subset, hence its distance to the query.
        let star = self.rng.random_range(0..nearest.len());
        let star_distance = nearest[star].1;
        let mut base: Vec<(R, R)> = nearest
            .iter()
            .map(|&(index, distance)| (distance, pool.samples()[index].reward))
            .collect();
        base.push((star_distance, R::zero()));
        base.push((star_distance, R::one()));

        let size = base.len();
        let mut resample: Vec<(R, R)> = (0..size)
            .map(|_| base[self.rng.random_range(0..size)])
            .collect();
        resample.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("non-finite distance"));
        resample.truncate(self.config.k.min(size));

        let distances: Vec<R> = resample.iter().map(|&(d, _)| d).collect();
        let bandwidth = rms_bandwidth(&distances, R::of(BANDWIDTH_FLOOR))?;
        let spec = KernelSpec::gaussian(bandwidth)?;
        let value = crate::kernel::nw_estimate(&spec, &resample)?;
        Ok(RewardEstimate { arm, value })
    }

    /// Samples estimates for every arm allowed by the mask.
    pub fn sample_masked(
        &mut self,
        query: &[R],
        mask: Option<&[bool]>,
    ) -> Result<Vec<RewardEstimate<R>>> {
        if let Some(m) = mask {
            if m.len() != self.pools.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.pools.len(),
                    got: m.len(),
                });
            }
        }
        let mut estimates = Vec::new();
        for arm in 0..self.pools.len() {
            if mask.is_none_or(|m| m[arm]) {
                estimates.push(self.sample_arm_reward(arm, query)?);
            }
        }
        if estimates.is_empty() {
            return Err(Error::EmptyInput("mask excludes every arm"));
        }
        Ok(estimates)
    }

    /// One full selection step over all arms.
    pub fn choose(&mut self, query: &[R]) -> Result<usize> {
        self.choose_masked_impl(query, None)
    }

    fn choose_masked_impl(&mut self, query: &[R], mask: Option<&[bool]>) -> Result<usize> {
        let estimates = self.sample_masked(query, mask)?;
        select_arm(&estimates, &mut self.rng)
    }
}

impl<R: Real> FilterableBandit<R> for KBoot<R> {
    fn arms(&self) -> usize {
        self.pools.len()
    }

    fn choose_masked(&mut self, query: &[R], mask: Option<&[bool]>) -> Result<usize> {
        self.choose_masked_impl(query, mask)
    }

    fn update(&mut self, arm: usize, query: &[R], reward: R) -> Result<()> {
        let len = self.pools.len();
        let pool = self
            .pools
            .get_mut(arm)
            .ok_or(Error::IndexOutOfRange { index: arm, len })?;
        pool.push(SampleRecord {
            context: query.to_vec(),
            reward,
        });
        Ok(())
    }
}
