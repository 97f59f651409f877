//! Bandit environments: synthetic reward families with per-arm parameters,
//! a calibrated eligibility-score simulator, and classification datasets
//! replayed as bandit rounds.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::eligibility::spearman_rho;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Shape of the per-arm mean reward as a function of the context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardFamily {
    /// h(x) = 0.1·xᵀa
    Linear,
    /// h(x) = 0.05·(xᵀa)²
    Quadratic,
    /// h(x) = 0.002·xᵀAᵀAx
    InnerProduct,
    /// h(x) = cos(3·xᵀa)
    Cosine,
}

/// One environment round: the context shown to the policy, the noiseless
/// per-arm means, and the noisy rewards the policy would observe.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSample<R> {
    pub context: Vec<R>,
    pub mean_rewards: Vec<R>,
    pub noisy_rewards: Vec<R>,
}

/// Synthetic contextual environment. Per-arm parameters (direction vector
/// a, matrix A for the inner-product family, noise level σ_r) are drawn
/// once at construction and never redrawn.
#[derive(Debug, Clone)]
pub struct SyntheticEnv<R> {
    arms: usize,
    dim: usize,
    family: RewardFamily,
    a: Vec<Vec<R>>,
    a_mat: Vec<Vec<R>>,
    sigma_r: Vec<R>,
    rng: ChaCha8Rng,
}

impl<R: Real> SyntheticEnv<R> {
    /// Draws the per-arm parameters on stream 0 of a ChaCha8 generator
    /// seeded with `seed`, in a fixed order (per arm: the d entries of a,
    /// then the d² entries of A when the family needs one, then σ_r from
    /// U(0.01, 0.5)); the same stream then serves the round draws.
    ///
    /// # Errors
    /// `InvalidParameter` for zero arms or dimension.
    pub fn new(arms: usize, dim: usize, family: RewardFamily, seed: u64) -> Result<Self> {
        if arms == 0 {
            return Err(Error::invalid("environment needs at least one arm"));
        }
        if dim == 0 {
            return Err(Error::invalid("context dimension must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mut a = Vec::with_capacity(arms);
        let mut a_mat = Vec::with_capacity(arms);
        let mut sigma_r = Vec::with_capacity(arms);
        for _ in 0..arms {
            a.push(
                (0..dim)
                    .map(|_| R::of(rng.sample::<f64, _>(StandardNormal)))
                    .collect(),
            );
            if family == RewardFamily::InnerProduct {
                a_mat.push(
                    (0..dim * dim)
                        .map(|_| R::of(rng.sample::<f64, _>(StandardNormal)))
                        .collect(),
                );
            }
            sigma_r.push(R::of(0.01 + 0.49 * rng.random::<f64>()));
        }
        Ok(SyntheticEnv {
            arms,
            dim,
            family,
            a,
            a_mat,
            sigma_r,
            rng,
        })
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> RewardFamily {
        self.family
    }

    /// Per-arm reward noise levels, each in [0.01, 0.5].
    pub fn sigma_r(&self) -> &[R] {
        &self.sigma_r
    }

    /// Direction parameter of one arm.
    pub fn a_vector(&self, arm: usize) -> Result<&[R]> {
        self.a
            .get(arm)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                index: arm,
                len: self.arms,
            })
    }

    /// Row-major matrix parameter of one arm (inner-product family only).
    pub fn a_matrix(&self, arm: usize) -> Option<&[R]> {
        self.a_mat.get(arm).map(Vec::as_slice)
    }

    fn dot_a(&self, arm: usize, x: &[R]) -> R {
        let mut acc = R::zero();
        for (ai, xi) in self.a[arm].iter().zip(x) {
            acc = acc + *ai * *xi;
        }
        acc
    }

    /// Noiseless mean rewards of every arm at a context.
    ///
    /// # Errors
    /// `DimensionMismatch` for a wrong-length context.
    pub fn mean_rewards(&self, x: &[R]) -> Result<Vec<R>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok((0..self.arms)
            .map(|arm| match self.family {
                RewardFamily::Linear => R::of(0.1) * self.dot_a(arm, x),
                RewardFamily::Quadratic => {
                    let s = self.dot_a(arm, x);
                    R::of(0.05) * s * s
                }
                RewardFamily::InnerProduct => {
                    let mat = &self.a_mat[arm];
                    let mut norm2 = R::zero();
                    for i in 0..self.dim {
                        let mut row = R::zero();
                        for j in 0..self.dim {
                            row = row + mat[i * self.dim + j] * x[j];
                        }
                        norm2 = norm2 + row * row;
                    }
                    R::of(0.002) * norm2
                }
                RewardFamily::Cosine => R::of((R::of(3.0) * self.dot_a(arm, x)).as_f64().cos()),
            })
            .collect())
    }

    /// Draws one round: a standard-normal context, the mean rewards, and
    /// per-arm noisy rewards mean + N(0, σ_r²). Consumes dim + arms draws
    /// from the environment stream in that order.
    pub fn round(&mut self) -> RoundSample<R> {
        let context: Vec<R> = (0..self.dim)
            .map(|_| R::of(self.rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mean_rewards = self
            .mean_rewards(&context)
            .expect("context drawn with the environment dimension");
        let noisy_rewards = mean_rewards
            .iter()
            .enumerate()
            .map(|(m, &mean)| {
                mean + self.sigma_r[m] * R::of(self.rng.sample::<f64, _>(StandardNormal))
            })
            .collect();
        RoundSample {
            context,
            mean_rewards,
            noisy_rewards,
        }
    }
}

/// Instantaneous regret of pulling `chosen`: the gap to the best mean
/// reward. Zero exactly when the chosen arm attains the maximum.
///
/// # Errors
/// `EmptyInput` for no arms, `IndexOutOfRange` for a bad arm.
pub fn regret_vs_best<R: Real>(mean_rewards: &[R], chosen: usize) -> Result<R> {
    if mean_rewards.is_empty() {
        return Err(Error::EmptyInput("regret over no arms"));
    }
    if chosen >= mean_rewards.len() {
        return Err(Error::IndexOutOfRange {
            index: chosen,
            len: mean_rewards.len(),
        });
    }
    let mut best = mean_rewards[0];
    for &m in &mean_rewards[1..] {
        if m > best {
            best = m;
        }
    }
    Ok(best - mean_rewards[chosen])
}

/// Min-max squash into [0, 1]; a zero span maps every entry to 0.5.
pub fn squash_scores<R: Real>(raw: &[R]) -> Vec<R> {
    let mut lo = R::infinity();
    let mut hi = R::neg_infinity();
    for &v in raw {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if raw.is_empty() || span <= R::zero() {
        return vec![R::of(0.5); raw.len()];
    }
    raw.iter().map(|&v| (v - lo) / span).collect()
}

/// Eligibility-score simulator: raw score w_m·r_m + N(0, σ_e²) per arm,
/// squashed per round into [0, 1].
#[derive(Debug, Clone)]
pub struct EligibilitySim<R> {
    w: Vec<R>,
    sigma_e: R,
    rng: ChaCha8Rng,
}

impl<R: Real> EligibilitySim<R> {
    /// Draws the per-arm scaling coefficients w ~ U(−0.1, 1) on stream 3
    /// of a ChaCha8 generator seeded with `seed`; the same stream then
    /// serves the per-round score noise. σ_e starts at 0 until
    /// [`EligibilitySim::set_sigma_e`] (usually with a calibrated value).
    ///
    /// # Errors
    /// `InvalidParameter` for zero arms.
    pub fn new(arms: usize, seed: u64) -> Result<Self> {
        if arms == 0 {
            return Err(Error::invalid("score simulator needs at least one arm"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let w = (0..arms)
            .map(|_| R::of(-0.1 + 1.1 * rng.random::<f64>()))
            .collect();
        Ok(EligibilitySim {
            w,
            sigma_e: R::zero(),
            rng,
        })
    }

    /// Simulator with explicit weights instead of drawn ones.
    ///
    /// # Errors
    /// `InvalidParameter` for empty weights or negative σ_e.
    pub fn with_weights(w: Vec<R>, sigma_e: R, seed: u64) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::EmptyInput("score simulator needs weights"));
        }
        if sigma_e < R::zero() {
            return Err(Error::invalid("score noise level must be nonnegative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        Ok(EligibilitySim { w, sigma_e, rng })
    }

    pub fn weights(&self) -> &[R] {
        &self.w
    }

    pub fn sigma_e(&self) -> R {
        self.sigma_e
    }

    /// # Errors
    /// `InvalidParameter` for a negative value.
    pub fn set_sigma_e(&mut self, sigma_e: R) -> Result<()> {
        if sigma_e < R::zero() {
            return Err(Error::invalid("score noise level must be nonnegative"));
        }
        self.sigma_e = sigma_e;
        Ok(())
    }

    /// Replaces the weights with a fresh U(−0.1, 1) draw from the
    /// simulator's stream. Negative or near-zero weights cap the pooled
    /// reward-score correlation reachable at zero noise, so callers
    /// calibrating toward a target correlation redraw until the target is
    /// attainable; the redraw count is a deterministic function of the
    /// seed, keeping runs reproducible.
    pub fn redraw_weights(&mut self) {
        for w in self.w.iter_mut() {
            *w = R::of(-0.1 + 1.1 * self.rng.random::<f64>());
        }
    }

    /// Raw (unsquashed) scores for one round. Always consumes one noise
    /// draw per arm, so the stream position does not depend on σ_e.
    ///
    /// # Errors
    /// `DimensionMismatch` when the reward count differs from the arms.
    pub fn raw_scores(&mut self, noisy_rewards: &[R]) -> Result<Vec<R>> {
        if noisy_rewards.len() != self.w.len() {
            return Err(Error::DimensionMismatch {
                expected: self.w.len(),
                got: noisy_rewards.len(),
            });
        }
        Ok(noisy_rewards
            .iter()
            .zip(&self.w)
            .map(|(&r, &w)| w * r + self.sigma_e * R::of(self.rng.sample::<f64, _>(StandardNormal)))
            .collect())
    }

    /// Per-round scores in [0, 1]: raw scores min-max squashed.
    pub fn scores(&mut self, noisy_rewards: &[R]) -> Result<Vec<R>> {
        Ok(squash_scores(&self.raw_scores(noisy_rewards)?))
    }
}

/// Pre-drawn simulation shared by every σ_e evaluation during calibration,
/// so the objective is a deterministic function of σ_e.
struct CalibrationDraws<R> {
    arms: usize,
    rewards: Vec<R>,
    score_noise: Vec<f64>,
}

impl<R: Real> CalibrationDraws<R> {
    fn generate(env: &SyntheticEnv<R>, rounds: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let arms = env.arms();
        let mut rewards = Vec::with_capacity(rounds * arms);
        let mut score_noise = Vec::with_capacity(rounds * arms);
        for _ in 0..rounds {
            let x: Vec<R> = (0..env.dim())
                .map(|_| R::of(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let means = env
                .mean_rewards(&x)
                .expect("context drawn with the environment dimension");
            for (m, &mean) in means.iter().enumerate() {
                rewards
                    .push(mean + env.sigma_r()[m] * R::of(rng.sample::<f64, _>(StandardNormal)));
            }
            for _ in 0..arms {
                score_noise.push(rng.sample::<f64, _>(StandardNormal));
            }
        }
        CalibrationDraws {
            arms,
            rewards,
            score_noise,
        }
    }

    /// Pooled Spearman correlation between rewards and raw scores over all
    /// (round, arm) pairs at one σ_e.
    fn rho_at(&self, weights: &[R], sigma_e: f64) -> f64 {
        let pairs: Vec<(f64, f64)> = self
            .rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let w = weights[i % self.arms].as_f64();
                (r.as_f64(), w * r.as_f64() + sigma_e * self.score_noise[i])
            })
            .collect();
        spearman_rho(&pairs)
            .expect("calibration pools more than 3 pairs")
            .rho
    }
}

/// Rounds used for the calibration objective.
pub const CALIBRATION_ROUNDS: usize = 10_000;

/// Finds a σ_e whose pooled reward-score rank correlation hits the target:
/// the correlation over all (round, arm) raw-score pairs across `rounds`
/// simulated rounds, evaluated on draws shared by every candidate σ_e
/// (stream 2 of a generator seeded with `seed`), is bisected to within
/// 0.02 of `target_rho`.
///
/// # Errors
/// `NonBracketing` when the target exceeds the correlation achievable at
/// σ_e = 0 (negative-w arms cap it below 1); `InvalidParameter` for a
/// target outside (0, 1), too few rounds, or a weight-count mismatch.
pub fn calibrate_sigma_e<R: Real>(
    env: &SyntheticEnv<R>,
    weights: &[R],
    target_rho: f64,
    rounds: usize,
    seed: u64,
) -> Result<R> {
    if !(target_rho > 0.0 && target_rho < 1.0) {
        return Err(Error::invalid(format!(
            "target correlation must lie strictly inside (0,1), got {target_rho}"
        )));
    }
    if weights.len() != env.arms() {
        return Err(Error::DimensionMismatch {
            expected: env.arms(),
            got: weights.len(),
        });
    }
    if rounds < 10 {
        return Err(Error::invalid("calibration needs at least 10 rounds"));
    }
    const TOL: f64 = 0.02;
    let draws = CalibrationDraws::generate(env, rounds, seed);
    let ceiling = draws.rho_at(weights, 0.0);
    if (ceiling - target_rho).abs() < TOL {
        return Ok(R::zero());
    }
    if ceiling < target_rho {
        return Err(Error::NonBracketing {
            target: target_rho,
            ceiling,
        });
    }
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    let mut expansions = 0;
    loop {
        let rho_hi = draws.rho_at(weights, hi);
        if (rho_hi - target_rho).abs() < TOL {
            return Ok(R::of(hi));
        }
        if rho_hi < target_rho {
            break;
        }
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::invalid(format!(
                "no noise level above {lo} brings the pooled correlation down to {target_rho}"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let rho_mid = draws.rho_at(weights, mid);
        if (rho_mid - target_rho).abs() < TOL {
            return Ok(R::of(mid));
        }
        if rho_mid > target_rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::invalid(format!(
        "calibration for target {target_rho} did not converge"
    )))
}

/// Column layout of a delimited classification file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    /// Cell separator.
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Skip the first line.
    #[serde(default)]
    pub has_header: bool,
    /// Zero-based index of the class-label column.
    pub label_col: usize,
}

fn default_delimiter() -> char {
    ','
}

impl Default for DatasetSchema {
    fn default() -> Self {
        DatasetSchema {
            delimiter: ',',
            has_header: false,
            label_col: 0,
        }
    }
}

/// A classification dataset ready for bandit replay: feature rows, dense
/// 0-based labels, and the original label names in first-appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationDataset<R> {
    pub features: Vec<Vec<R>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub label_names: Vec<String>,
    pub source: String,
}

impl<R: Real> ClassificationDataset<R> {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Standardizes every feature column in place: subtract the column
    /// mean, divide by the sample standard deviation; constant columns
    /// become all zeros.
    pub fn zscore(&mut self) {
        let rows = self.features.len();
        if rows < 2 {
            return;
        }
        let dim = self.dim();
        for j in 0..dim {
            let mean = self.features.iter().map(|r| r[j].as_f64()).sum::<f64>() / rows as f64;
            let var = self
                .features
                .iter()
                .map(|r| {
                    let d = r[j].as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / (rows as f64 - 1.0);
            let std = var.sqrt();
            for row in &mut self.features {
                let v = row[j].as_f64();
                row[j] = if std > 0.0 {
                    R::of((v - mean) / std)
                } else {
                    R::zero()
                };
            }
        }
    }
}

/// Parses a delimited text file into a classification dataset. Labels may
/// be arbitrary strings; they are densified to 0-based indices in order of
/// first appearance. Feature cells must parse as numbers.
///
/// # Errors
/// `Parse` (with 1-based line and column) for ragged rows, empty cells, or
/// non-numeric features; `EmptyInput` when no data rows remain; `Io` when
/// the file cannot be read.
pub fn load_dataset<R: Real>(path: &Path, schema: &DatasetSchema) -> Result<ClassificationDataset<R>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fail = |row: usize, col: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        col,
        message,
    };
    let mut features: Vec<Vec<R>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut label_ids: HashMap<String, usize> = HashMap::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if schema.has_header && i == 0 {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(schema.delimiter).map(str::trim).collect();
        match width {
            None => {
                if schema.label_col >= cells.len() {
                    return Err(fail(
                        line_no,
                        schema.label_col + 1,
                        format!(
                            "label column {} does not exist in a {}-column row",
                            schema.label_col,
                            cells.len()
                        ),
                    ));
                }
                width = Some(cells.len());
            }
            Some(w) if cells.len() != w => {
                return Err(fail(
                    line_no,
                    cells.len().min(w) + 1,
                    format!("expected {w} columns, found {}", cells.len()),
                ));
            }
            _ => {}
        }
        let mut row_features = Vec::with_capacity(cells.len() - 1);
        for (c, cell) in cells.iter().enumerate() {
            if cell.is_empty() {
                return Err(fail(line_no, c + 1, "empty cell".to_string()));
            }
            if c == schema.label_col {
                let next = label_names.len();
                let id = *label_ids.entry(cell.to_string()).or_insert_with(|| {
                    label_names.push(cell.to_string());
                    next
                });
                labels.push(id);
            } else {
                let v: f64 = cell.parse().map_err(|e| {
                    fail(line_no, c + 1, format!("non-numeric feature '{cell}': {e}"))
                })?;
                row_features.push(R::of(v));
            }
        }
        features.push(row_features);
    }
    if features.is_empty() {
        return Err(Error::EmptyInput("dataset has no data rows"));
    }
    Ok(ClassificationDataset {
        features,
        labels,
        n_classes: label_names.len(),
        label_names,
        source: path.display().to_string(),
    })
}

/// Splits a dataset into per-run round streams of row indices. With enough
/// rows the dataset is shuffled once (stream 4 of a generator seeded with
/// `seed`) and cut into disjoint consecutive chunks; otherwise, when
/// `resample_if_short` is set, each run draws its rows independently with
/// replacement.
///
/// # Errors
/// `InsufficientRows` when the dataset is too small and resampling is
/// disabled; `InvalidParameter` for zero run size or count.
pub fn dataset_to_runs<R: Real>(
    ds: &ClassificationDataset<R>,
    run_size: usize,
    n_runs: usize,
    seed: u64,
    resample_if_short: bool,
) -> Result<Vec<Vec<usize>>> {
    if run_size == 0 || n_runs == 0 {
        return Err(Error::invalid("run size and run count must be positive"));
    }
    let rows = ds.len();
    let needed = run_size * n_runs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    if needed > rows {
        if !resample_if_short {
            return Err(Error::InsufficientRows {
                needed,
                available: rows,
            });
        }
        return Ok((0..n_runs)
            .map(|_| (0..run_size).map(|_| rng.random_range(0..rows)).collect())
            .collect());
    }
    let mut indices: Vec<usize> = (0..rows).collect();
    indices.shuffle(&mut rng);
    Ok((0..n_runs)
        .map(|r| indices[r * run_size..(r + 1) * run_size].to_vec())
        .collect())
}
