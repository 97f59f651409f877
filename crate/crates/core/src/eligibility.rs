//! Eligibility control: score-based arm filtering with a risk-calibrated
//! top-k threshold.
//!
//! Each round the arms' eligibility scores are cut at the k-th largest
//! value and only arms at or above the cut are sampled. The threshold k
//! comes from an offline dictionary mapping (risk level α, rank correlation
//! ρ) to the smallest k whose simulated "leak" probability (the best arm
//! falling below the cut) stays within α. The dictionary is built by Monte
//! Carlo: rank sequences are perturbed by random adjacent swaps, and the
//! resulting displacement of element 1 is tabulated against the empirical
//! Spearman correlation of the perturbed sequence. Online, ρ is estimated
//! from the observed (reward, chosen score) pairs and the threshold is
//! refreshed periodically; a fallback disables filtering whenever the
//! looked-up k is too close to the arm count to be worth the risk.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kboot::FilterableBandit;
use crate::scalar::Real;

/// Width of one rank-correlation bucket; centers sit at multiples of this
/// on [0, 1].
pub const RHO_BUCKET_WIDTH: f64 = 0.05;

const DICTIONARY_HEADER: &str = "kboot-leak-dictionary v1";

/// Binary per-arm eligibility claims over system states plus a probability
/// vector over those states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateClaims<R> {
    claims: Vec<Vec<bool>>,
    state_dist: Vec<R>,
}

impl<R: Real> StateClaims<R> {
    /// Validates shape (rectangular M×L claims, length-L distribution),
    /// nonnegativity, and that the distribution sums to 1 within 1e-9.
    pub fn new(claims: Vec<Vec<bool>>, state_dist: Vec<R>) -> Result<Self> {
        if claims.is_empty() {
            return Err(Error::EmptyInput("state claims need at least one arm"));
        }
        let states = state_dist.len();
        if states == 0 {
            return Err(Error::EmptyInput("state distribution is empty"));
        }
        for row in &claims {
            if row.len() != states {
                return Err(Error::DimensionMismatch {
                    expected: states,
                    got: row.len(),
                });
            }
        }
        let mut total = 0.0;
        for &p in &state_dist {
            let p = p.as_f64();
            if p.is_nan() || p < 0.0 {
                return Err(Error::invalid(format!(
                    "state probabilities must be nonnegative, got {p}"
                )));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "state probabilities must sum to 1, got {total}"
            )));
        }
        Ok(StateClaims { claims, state_dist })
    }

    pub fn arms(&self) -> usize {
        self.claims.len()
    }

    pub fn states(&self) -> usize {
        self.state_dist.len()
    }

    /// Per-arm scores e_j = Σ_l c_{j,l} p_l, each in [0, 1].
    pub fn to_scores(&self) -> Vec<R> {
        self.claims
            .iter()
            .map(|row| {
                let mut e = R::zero();
                for (claimed, &p) in row.iter().zip(&self.state_dist) {
                    if *claimed {
                        e = e + p;
                    }
                }
                e
            })
            .collect()
    }
}

/// A Spearman rank correlation together with a degeneracy marker: when
/// either coordinate is constant the correlation is undefined and reported
/// as 0 with `degenerate` set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCorrelation {
    pub rho: f64,
    pub degenerate: bool,
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("non-finite value"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &original in &order[i..=j] {
            ranks[original] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rank correlation of the pairs: Pearson correlation of the
/// two coordinates after replacing values with average ranks.
///
/// # Errors
/// `InvalidParameter` with fewer than 3 pairs.
pub fn spearman_rho<R: Real>(pairs: &[(R, R)]) -> Result<RankCorrelation> {
    if pairs.len() < 3 {
        return Err(Error::invalid(format!(
            "rank correlation needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let xs: Vec<f64> = pairs.iter().map(|&(x, _)| x.as_f64()).collect();
    let ys: Vec<f64> = pairs.iter().map(|&(_, y)| y.as_f64()).collect();
    let rx = average_ranks(&xs);
    let ry = average_ranks(&ys);
    let n = pairs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(RankCorrelation {
            rho: 0.0,
            degenerate: true,
        });
    }
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok(RankCorrelation {
        rho,
        degenerate: false,
    })
}

/// Applies `p` random adjacent swaps to the identity rank sequence
/// (1, …, n_len). Each swap position is uniform over the n_len − 1
/// adjacent pairs. With fewer than two elements there is nothing to swap
/// and the identity is returned.
pub fn neighbor_inversion_perturb(n_len: usize, p: usize, rng: &mut impl Rng) -> Vec<u32> {
    let mut seq: Vec<u32> = (1..=n_len as u32).collect();
    if n_len < 2 {
        return seq;
    }
    for _ in 0..p {
        let i = rng.random_range(0..n_len - 1);
        seq.swap(i, i + 1);
    }
    seq
}

/// Leak statistics for one perturbation strength.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakRow {
    /// Number of adjacent swaps applied per replicate.
    pub p: usize,
    /// Mean Spearman correlation between identity and perturbed sequence.
    pub mean_rho: f64,
    /// `leak_freq[k-1]` is the fraction of replicates where element 1 ended
    /// strictly below position k (1-based), for k = 1…seq_len.
    pub leak_freq: Vec<f64>,
}

/// Monte-Carlo leak table over a grid of perturbation strengths.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakTable {
    pub seq_len: usize,
    pub replications: usize,
    pub seed: u64,
    pub rows: Vec<LeakRow>,
}

fn simulate_row(n_len: usize, p: usize, replications: usize, seed: u64) -> LeakRow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(p as u64);
    let denom = (n_len * (n_len * n_len - 1)) as f64;
    let mut position_counts = vec![0u64; n_len];
    let mut rho_sum = 0.0;
    for _ in 0..replications {
        let seq = neighbor_inversion_perturb(n_len, p, &mut rng);
        let mut d2 = 0i64;
        let mut one_index = 0usize;
        for (i, &v) in seq.iter().enumerate() {
            let d = v as i64 - (i as i64 + 1);
            d2 += d * d;
            if v == 1 {
                one_index = i;
            }
        }
        // Spearman against the identity reduces to the squared-displacement
        // form because both sequences are tie-free permutations.
        rho_sum += 1.0 - 6.0 * d2 as f64 / denom;
        position_counts[one_index] += 1;
    }
    let mut beyond = vec![0u64; n_len + 1];
    for i in (0..n_len).rev() {
        beyond[i] = beyond[i + 1] + position_counts[i];
    }
    let leak_freq = (1..=n_len)
        .map(|k| beyond[k] as f64 / replications as f64)
        .collect();
    LeakRow {
        p,
        mean_rho: rho_sum / replications as f64,
        leak_freq,
    }
}

/// Simulates the leak table: for each perturbation strength in `p_grid`,
/// runs `replications` independent perturbations of (1…n_len), recording
/// the mean rank correlation and, per threshold k, how often element 1
/// landed strictly below position k.
///
/// Rows are computed in parallel; each row uses its own random stream keyed
/// by the p value, so a row is bit-identical for a given (seed, p)
/// regardless of grid composition or thread schedule.
///
/// # Errors
/// `InvalidParameter` when n_len < 2, the grid is empty, or replications
/// is 0.
pub fn simulate_leak_table(
    n_len: usize,
    p_grid: &[usize],
    replications: usize,
    seed: u64,
) -> Result<LeakTable> {
    if n_len < 2 {
        return Err(Error::invalid(
            "leak simulation needs a sequence of at least 2 ranks",
        ));
    }
    if p_grid.is_empty() {
        return Err(Error::EmptyInput("perturbation grid is empty"));
    }
    if replications == 0 {
        return Err(Error::invalid("replication count must be positive"));
    }
    let rows: Vec<LeakRow> = p_grid
        .par_iter()
        .map(|&p| simulate_row(n_len, p, replications, seed))
        .collect();
    Ok(LeakTable {
        seq_len: n_len,
        replications,
        seed,
        rows,
    })
}

/// Geometric grid of perturbation counts from 0 to n_len³ with the given
/// ratio between consecutive values (deduplicated after rounding).
///
/// # Errors
/// `InvalidParameter` when n_len < 2 or ratio ≤ 1.
pub fn geometric_p_grid(n_len: usize, ratio: f64) -> Result<Vec<usize>> {
    if n_len < 2 {
        return Err(Error::invalid(
            "perturbation grid needs a sequence of at least 2 ranks",
        ));
    }
    if ratio.is_nan() || ratio <= 1.0 {
        return Err(Error::invalid(format!(
            "grid ratio must exceed 1, got {ratio}"
        )));
    }
    let p_max = n_len * n_len * n_len;
    let mut grid = vec![0usize];
    let mut x = 1.0f64;
    while (x.round() as usize) < p_max {
        let v = x.round() as usize;
        if *grid.last().unwrap() != v {
            grid.push(v);
        }
        x *= ratio;
    }
    grid.push(p_max);
    Ok(grid)
}

/// Offline dictionary mapping (risk level α, rank correlation ρ) to a
/// top-k threshold, with full provenance of the simulation that built it.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakDictionary {
    seq_len: usize,
    replications: usize,
    seed: u64,
    rho_bucket_width: f64,
    alphas: Vec<f64>,
    p_grid: Vec<usize>,
    mean_rho: Vec<f64>,
    /// ks[alpha index][bucket index], bucket centers at multiples of the
    /// bucket width starting from 0.
    ks: Vec<Vec<usize>>,
}

/// Outcome of a threshold lookup: the dictionary value and the value after
/// the fallback rule (k := M whenever the raw k is at least (1 − α)·M).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdDecision {
    pub raw_k: usize,
    pub k: usize,
    pub fallback: bool,
}

/// Builds the dictionary from a simulated leak table. For every (α, ρ
/// bucket center) the threshold is the smallest k whose leak frequency, at
/// the row whose mean correlation is nearest the center, stays within α;
/// a final isotonic pass makes k nonincreasing in ρ for each α.
///
/// # Errors
/// `InsufficientGrid` when some bucket center has no row within one bucket
/// width; `InvalidParameter` for an empty or out-of-range α grid.
pub fn build_dictionary(table: &LeakTable, alpha_grid: &[f64]) -> Result<LeakDictionary> {
    if alpha_grid.is_empty() {
        return Err(Error::EmptyInput("alpha grid is empty"));
    }
    let mut alphas: Vec<f64> = alpha_grid.to_vec();
    for &a in &alphas {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::invalid(format!(
                "risk levels must lie in [0,1], got {a}"
            )));
        }
    }
    alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    alphas.dedup();

    let buckets = (1.0 / RHO_BUCKET_WIDTH).round() as usize + 1;
    let nearest_row: Vec<usize> = (0..buckets)
        .map(|b| {
            let center = b as f64 * RHO_BUCKET_WIDTH;
            let mut best = 0;
            let mut best_dist = f64::INFINITY;
            for (i, row) in table.rows.iter().enumerate() {
                let dist = (row.mean_rho - center).abs();
                if dist < best_dist {
                    best_dist = dist;
                    best = i;
                }
            }
            best
        })
        .collect();
    let max_gap = (0..buckets)
        .map(|b| (table.rows[nearest_row[b]].mean_rho - b as f64 * RHO_BUCKET_WIDTH).abs())
        .fold(0.0f64, f64::max);
    if max_gap > RHO_BUCKET_WIDTH {
        return Err(Error::InsufficientGrid {
            max_gap,
            limit: RHO_BUCKET_WIDTH,
        });
    }

    let mut ks: Vec<Vec<usize>> = Vec::with_capacity(alphas.len());
    for &alpha in &alphas {
        let mut per_bucket: Vec<usize> = (0..buckets)
            .map(|b| {
                let row = &table.rows[nearest_row[b]];
                row.leak_freq
                    .iter()
                    .position(|&f| f <= alpha)
                    .expect("leak frequency reaches 0 at k = seq_len")
                    + 1
            })
            .collect();
        for b in (0..buckets - 1).rev() {
            per_bucket[b] = per_bucket[b].max(per_bucket[b + 1]);
        }
        ks.push(per_bucket);
    }

    Ok(LeakDictionary {
        seq_len: table.seq_len,
        replications: table.replications,
        seed: table.seed,
        rho_bucket_width: RHO_BUCKET_WIDTH,
        alphas,
        p_grid: table.rows.iter().map(|r| r.p).collect(),
        mean_rho: table.rows.iter().map(|r| r.mean_rho).collect(),
        ks,
    })
}

impl LeakDictionary {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn replications(&self) -> usize {
        self.replications
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn buckets(&self) -> usize {
        self.ks[0].len()
    }

    pub fn bucket_center(&self, bucket: usize) -> f64 {
        bucket as f64 * self.rho_bucket_width
    }

    /// Threshold stored for one (α index, bucket index) cell.
    pub fn k_at(&self, alpha_index: usize, bucket: usize) -> usize {
        self.ks[alpha_index][bucket]
    }

    fn nearest_alpha(&self, alpha: f64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, &a) in self.alphas.iter().enumerate() {
            let dist = (a - alpha).abs();
            if dist < best_dist {
                best_dist = dist;
                best = i;
            }
        }
        best
    }

    fn nearest_bucket(&self, rho_hat: f64) -> usize {
        let b = (rho_hat / self.rho_bucket_width).round();
        let top = (self.buckets() - 1) as f64;
        b.clamp(0.0, top) as usize
    }

    /// Dictionary value at the nearest (α, ρ) cell, before the fallback
    /// rule. Nonpositive correlations map to the lowest bucket.
    pub fn query_raw(&self, alpha: f64, rho_hat: f64) -> usize {
        self.ks[self.nearest_alpha(alpha)][self.nearest_bucket(rho_hat)]
    }

    /// Threshold lookup with the fallback: when the raw k is at least
    /// (1 − α)·M the filter is not worth its leak risk and k resets to M.
    pub fn query_decision(&self, alpha: f64, rho_hat: f64) -> ThresholdDecision {
        let raw_k = self.query_raw(alpha, rho_hat);
        let m = self.seq_len;
        if raw_k as f64 >= (1.0 - alpha) * m as f64 {
            ThresholdDecision {
                raw_k,
                k: m,
                fallback: true,
            }
        } else {
            ThresholdDecision {
                raw_k,
                k: raw_k,
                fallback: false,
            }
        }
    }

    pub fn query_k(&self, alpha: f64, rho_hat: f64) -> usize {
        self.query_decision(alpha, rho_hat).k
    }

    /// Serializes to the versioned text format. The output is canonical:
    /// writing a parsed dictionary reproduces the input byte for byte.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{DICTIONARY_HEADER}");
        let _ = writeln!(out, "seq_len {}", self.seq_len);
        let _ = writeln!(out, "replications {}", self.replications);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "rho_bucket_width {}", self.rho_bucket_width);
        let _ = write!(out, "alpha_grid");
        for a in &self.alphas {
            let _ = write!(out, " {a}");
        }
        out.push('\n');
        let _ = write!(out, "p_grid");
        for p in &self.p_grid {
            let _ = write!(out, " {p}");
        }
        out.push('\n');
        let _ = write!(out, "mean_rho");
        for r in &self.mean_rho {
            let _ = write!(out, " {r}");
        }
        out.push('\n');
        let _ = writeln!(out, "rows {}", self.alphas.len() * self.buckets());
        for (ai, alpha) in self.alphas.iter().enumerate() {
            for b in 0..self.buckets() {
                let _ = writeln!(
                    out,
                    "row {ai} {b} {alpha} {} {}",
                    self.bucket_center(b),
                    self.ks[ai][b]
                );
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses the versioned text format; `origin` names the source in
    /// errors.
    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let fail = |line: usize, message: String| Error::Parse {
            path: origin.into(),
            row: line,
            col: 0,
            message,
        };
        let mut lines = text.lines().enumerate();
        let mut expect = |key: &str| -> Result<(usize, String)> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| fail(0, format!("missing line '{key}'")))?;
            if key.is_empty() {
                return Ok((i + 1, line.to_string()));
            }
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| fail(i + 1, format!("expected line to start with '{key}'")))?;
            Ok((i + 1, rest.trim().to_string()))
        };

        let (line, header) = expect("")?;
        if header != DICTIONARY_HEADER {
            return Err(fail(line, format!("unrecognized header '{header}'")));
        }
        let parse_usize = |line: usize, s: &str| {
            s.parse::<usize>()
                .map_err(|e| fail(line, format!("bad count '{s}': {e}")))
        };
        let parse_f64 = |line: usize, s: &str| {
            s.parse::<f64>()
                .map_err(|e| fail(line, format!("bad number '{s}': {e}")))
        };

        let (line, v) = expect("seq_len")?;
        let seq_len = parse_usize(line, &v)?;
        let (line, v) = expect("replications")?;
        let replications = parse_usize(line, &v)?;
        let (line, v) = expect("seed")?;
        let seed = v
            .parse::<u64>()
            .map_err(|e| fail(line, format!("bad seed '{v}': {e}")))?;
        let (line, v) = expect("rho_bucket_width")?;
        let rho_bucket_width = parse_f64(line, &v)?;
        if rho_bucket_width != RHO_BUCKET_WIDTH {
            return Err(fail(
                line,
                format!("unsupported bucket width {rho_bucket_width}"),
            ));
        }
        let (line, v) = expect("alpha_grid")?;
        let alphas = v
            .split_whitespace()
            .map(|s| parse_f64(line, s))
            .collect::<Result<Vec<f64>>>()?;
        if alphas.is_empty() {
            return Err(fail(line, "alpha grid is empty".to_string()));
        }
        let (line, v) = expect("p_grid")?;
        let p_grid = v
            .split_whitespace()
            .map(|s| parse_usize(line, s))
            .collect::<Result<Vec<usize>>>()?;
        let (line, v) = expect("mean_rho")?;
        let mean_rho = v
            .split_whitespace()
            .map(|s| parse_f64(line, s))
            .collect::<Result<Vec<f64>>>()?;
        if mean_rho.len() != p_grid.len() {
            return Err(fail(line, "mean_rho and p_grid lengths differ".to_string()));
        }
        let (line, v) = expect("rows")?;
        let row_count = parse_usize(line, &v)?;
        let buckets = (1.0 / rho_bucket_width).round() as usize + 1;
        if row_count != alphas.len() * buckets {
            return Err(fail(
                line,
                format!(
                    "expected {} rows for {} alphas x {buckets} buckets, header says {row_count}",
                    alphas.len() * buckets,
                    alphas.len()
                ),
            ));
        }

        let mut ks = vec![vec![0usize; buckets]; alphas.len()];
        for _ in 0..row_count {
            let (line, v) = expect("row")?;
            let fields: Vec<&str> = v.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(fail(line, format!("expected 5 row fields, got {}", fields.len())));
            }
            let ai = parse_usize(line, fields[0])?;
            let b = parse_usize(line, fields[1])?;
            if ai >= alphas.len() || b >= buckets {
                return Err(fail(line, format!("row index ({ai}, {b}) out of range")));
            }
            let alpha_echo = parse_f64(line, fields[2])?;
            if alpha_echo != alphas[ai] {
                return Err(fail(
                    line,
                    format!("alpha echo {alpha_echo} disagrees with grid entry {}", alphas[ai]),
                ));
            }
            let center_echo = parse_f64(line, fields[3])?;
            let center = b as f64 * rho_bucket_width;
            if center_echo != center {
                return Err(fail(
                    line,
                    format!("bucket center echo {center_echo} disagrees with {center}"),
                ));
            }
            let k = parse_usize(line, fields[4])?;
            if k < 1 || k > seq_len {
                return Err(fail(line, format!("threshold {k} outside 1..={seq_len}")));
            }
            ks[ai][b] = k;
        }
        let (line, trailer) = expect("")?;
        if trailer != "end" {
            return Err(fail(line, format!("expected trailing 'end', got '{trailer}'")));
        }
        Ok(LeakDictionary {
            seq_len,
            replications,
            seed,
            rho_bucket_width,
            alphas,
            p_grid,
            mean_rho,
            ks,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Top-k mask over scores: true exactly where the score is at least the
/// k-th largest value, so threshold ties all pass and at least k arms
/// survive.
///
/// # Errors
/// `EmptyInput` for no scores, `InvalidParameter` unless 1 ≤ k ≤ M.
pub fn ec_filter<R: Real>(scores: &[R], k: usize) -> Result<Vec<bool>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("eligibility filter over no scores"));
    }
    if k < 1 || k > scores.len() {
        return Err(Error::invalid(format!(
            "threshold k must lie in 1..={}, got {k}",
            scores.len()
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("non-finite score"));
    let cutoff = sorted[k - 1];
    Ok(scores.iter().map(|&e| e >= cutoff).collect())
}

/// Eligibility-control knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcConfig {
    /// Tolerated leak risk α in [0, 1].
    pub alpha: f64,
    /// Threshold used before the first refresh.
    pub k0: usize,
    /// Rounds between correlation refreshes; 0 pins the threshold at k0
    /// forever.
    pub update_period: usize,
}

impl EcConfig {
    /// Conservative defaults for an M-arm bandit: start unfiltered
    /// (k0 = M) and refresh every 50 rounds.
    pub fn with_defaults(alpha: f64, arms: usize) -> Self {
        EcConfig {
            alpha,
            k0: arms,
            update_period: 50,
        }
    }
}

/// One threshold refresh, kept for audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRefresh {
    pub round: usize,
    pub rho_hat: f64,
    pub degenerate: bool,
    pub raw_k: usize,
    pub k: usize,
    pub fallback: bool,
}

/// Online eligibility controller wrapping a bandit with arm-independent
/// reward models. Each round it masks arms through the top-k score filter,
/// lets the bandit choose among survivors, and accumulates (reward, chosen
/// score) pairs; every `update_period` rounds the rank correlation of that
/// pool refreshes the threshold through the dictionary.
#[derive(Debug, Clone)]
pub struct EcController<R, B> {
    bandit: B,
    dictionary: LeakDictionary,
    config: EcConfig,
    k: usize,
    pool: Vec<(R, R)>,
    round: usize,
    pending: Option<(usize, R)>,
    history: Vec<ThresholdRefresh>,
}

impl<R: Real, B: FilterableBandit<R>> EcController<R, B> {
    /// # Errors
    /// `InvalidParameter` when α is outside [0, 1] or k0 outside 1..=M;
    /// `DimensionMismatch` when the dictionary was built for a different
    /// arm count.
    pub fn new(bandit: B, dictionary: LeakDictionary, config: EcConfig) -> Result<Self> {
        let arms = bandit.arms();
        if !(0.0..=1.0).contains(&config.alpha) {
            return Err(Error::invalid(format!(
                "risk level must lie in [0,1], got {}",
                config.alpha
            )));
        }
        if config.k0 < 1 || config.k0 > arms {
            return Err(Error::invalid(format!(
                "initial threshold must lie in 1..={arms}, got {}",
                config.k0
            )));
        }
        if dictionary.seq_len() != arms {
            return Err(Error::DimensionMismatch {
                expected: arms,
                got: dictionary.seq_len(),
            });
        }
        Ok(EcController {
            bandit,
            dictionary,
            config,
            k: config.k0,
            pool: Vec::new(),
            round: 0,
            pending: None,
            history: Vec::new(),
        })
    }

    pub fn current_k(&self) -> usize {
        self.k
    }

    pub fn history(&self) -> &[ThresholdRefresh] {
        &self.history
    }

    pub fn correlation_pairs(&self) -> &[(R, R)] {
        &self.pool
    }

    pub fn rounds(&self) -> usize {
        self.round
    }

    pub fn bandit(&self) -> &B {
        &self.bandit
    }

    /// Filters arms by the current threshold and lets the bandit pick among
    /// the survivors. Must be followed by [`EcController::update`] before
    /// the next call.
    pub fn choose(&mut self, query: &[R], scores: &[R]) -> Result<usize> {
        if self.pending.is_some() {
            return Err(Error::invalid(
                "previous round has not been updated with its reward yet",
            ));
        }
        if scores.len() != self.bandit.arms() {
            return Err(Error::DimensionMismatch {
                expected: self.bandit.arms(),
                got: scores.len(),
            });
        }
        let mask = ec_filter(scores, self.k)?;
        let arm = self.bandit.choose_masked(query, Some(&mask))?;
        self.pending = Some((arm, scores[arm]));
        Ok(arm)
    }

    /// Feeds the observed reward for the arm chosen by the last
    /// [`EcController::choose`] call, then refreshes the threshold when the
    /// period elapses (skipped while fewer than 3 pairs are pooled).
    pub fn update(&mut self, query: &[R], reward: R) -> Result<()> {
        let (arm, score) = self
            .pending
            .take()
            .ok_or_else(|| Error::invalid("no pending choice to update"))?;
        self.bandit.update(arm, query, reward)?;
        self.pool.push((reward, score));
        self.round += 1;
        if self.config.update_period > 0
            && self.round.is_multiple_of(self.config.update_period)
            && self.pool.len() >= 3
        {
            let corr = spearman_rho(&self.pool)?;
            let decision = self.dictionary.query_decision(self.config.alpha, corr.rho);
            self.k = decision.k;
            self.history.push(ThresholdRefresh {
                round: self.round,
                rho_hat: corr.rho,
                degenerate: corr.degenerate,
                raw_k: decision.raw_k,
                k: decision.k,
                fallback: decision.fallback,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kboot::{KBoot, KBootConfig};
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn quick_dictionary(n: usize, alphas: &[f64], seed: u64) -> LeakDictionary {
        let grid = geometric_p_grid(n, 1.12).unwrap();
        let table = simulate_leak_table(n, &grid, 20_000, seed).unwrap();
        build_dictionary(&table, alphas).unwrap()
    }

    #[test]
    fn state_scores_inner_product() {
        let sc = StateClaims::new(
            vec![vec![true, false, true], vec![true, true, true], vec![false; 3]],
            vec![0.2, 0.5, 0.3],
        )
        .unwrap();
        let scores = sc.to_scores();
        assert_abs_diff_eq!(scores[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(scores[1], 1.0, epsilon = 1e-15);
        assert_eq!(scores[2], 0.0);
    }

    #[test]
    fn state_claims_validation() {
        assert!(StateClaims::<f64>::new(vec![], vec![1.0]).is_err());
        assert!(StateClaims::new(vec![vec![true, false]], vec![1.0]).is_err());
        assert!(StateClaims::new(vec![vec![true, true]], vec![0.6, 0.6]).is_err());
        assert!(StateClaims::new(vec![vec![true, true]], vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn spearman_monotone_sequences() {
        let up = spearman_rho(&[(1.0, 10.0), (2.0, 20.0), (3.0, 30.0)]).unwrap();
        assert_eq!(up.rho, 1.0);
        assert!(!up.degenerate);
        let down = spearman_rho(&[(1.0, 30.0), (2.0, 20.0), (3.0, 10.0)]).unwrap();
        assert_eq!(down.rho, -1.0);
    }

    #[test]
    fn spearman_tie_hand_value() {
        let c = spearman_rho(&[(1.0, 5.0), (2.0, 5.0), (3.0, 9.0)]).unwrap();
        assert_abs_diff_eq!(c.rho, 0.8660254037844387, epsilon = 1e-15);
    }

    #[test]
    fn spearman_degenerate_and_short() {
        let c = spearman_rho(&[(1.0, 5.0), (2.0, 5.0), (3.0, 5.0)]).unwrap();
        assert_eq!(c.rho, 0.0);
        assert!(c.degenerate);
        assert!(spearman_rho(&[(1.0, 2.0), (3.0, 4.0)]).is_err());
    }

    /// Independent oracle: ranks by pairwise counting instead of sorting,
    /// correlation by the expanded product-moment formula.
    fn counting_spearman(xs: &[f64], ys: &[f64]) -> f64 {
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&a| {
                    let less = v.iter().filter(|&&b| b < a).count() as f64;
                    let equal = v.iter().filter(|&&b| b == a).count() as f64;
                    less + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let rx = rank(xs);
        let ry = rank(ys);
        let n = xs.len() as f64;
        let sx: f64 = rx.iter().sum();
        let sy: f64 = ry.iter().sum();
        let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
        let sxx: f64 = rx.iter().map(|a| a * a).sum();
        let syy: f64 = ry.iter().map(|b| b * b).sum();
        let num = n * sxy - sx * sy;
        let den = ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    #[test]
    fn spearman_matches_counting_oracle_exhaustively() {
        for len in 3..=4usize {
            let total = 3usize.pow(len as u32);
            for xi in 0..total {
                for yi in 0..total {
                    let decode = |mut v: usize| -> Vec<f64> {
                        (0..len)
                            .map(|_| {
                                let d = (v % 3) as f64 + 1.0;
                                v /= 3;
                                d
                            })
                            .collect()
                    };
                    let xs = decode(xi);
                    let ys = decode(yi);
                    let pairs: Vec<(f64, f64)> =
                        xs.iter().copied().zip(ys.iter().copied()).collect();
                    let got = spearman_rho(&pairs).unwrap().rho;
                    let want = counting_spearman(&xs, &ys);
                    assert!(
                        (got - want).abs() < 1e-13,
                        "xs {xs:?} ys {ys:?}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn perturb_identity_and_pair() {
        let mut r = rng(0);
        assert_eq!(neighbor_inversion_perturb(5, 0, &mut r), vec![1, 2, 3, 4, 5]);
        assert_eq!(neighbor_inversion_perturb(2, 1, &mut r), vec![2, 1]);
        assert_eq!(neighbor_inversion_perturb(1, 4, &mut r), vec![1]);
    }

    #[test]
    fn perturb_three_single_swap_frequencies() {
        let mut r = rng(5);
        let mut first = 0usize;
        let draws = 100_000;
        for _ in 0..draws {
            match neighbor_inversion_perturb(3, 1, &mut r).as_slice() {
                [2, 1, 3] => first += 1,
                [1, 3, 2] => {}
                other => panic!("impossible single-swap result {other:?}"),
            }
        }
        let freq = first as f64 / draws as f64;
        assert!((freq - 0.5).abs() < 0.005, "frequency {freq}");
    }

    #[test]
    fn perturb_always_yields_permutation() {
        let mut r = rng(9);
        for _ in 0..200 {
            let n = r.random_range(2..12);
            let p = r.random_range(0..50);
            let mut seq = neighbor_inversion_perturb(n, p, &mut r);
            seq.sort_unstable();
            let identity: Vec<u32> = (1..=n as u32).collect();
            assert_eq!(seq, identity);
        }
    }

    #[test]
    fn leak_table_identity_row() {
        let table = simulate_leak_table(6, &[0], 500, 1).unwrap();
        let row = &table.rows[0];
        assert_eq!(row.mean_rho, 1.0);
        assert!(row.leak_freq.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn leak_table_three_single_swap() {
        let table = simulate_leak_table(3, &[1], 100_000, 2).unwrap();
        let row = &table.rows[0];
        assert_eq!(row.mean_rho, 0.5);
        assert!((row.leak_freq[0] - 0.5).abs() < 0.01, "{}", row.leak_freq[0]);
        assert_eq!(row.leak_freq[1], 0.0);
        assert_eq!(row.leak_freq[2], 0.0);
    }

    #[test]
    fn leak_table_heavy_perturbation_matches_uniform_line() {
        let n = 10;
        let table = simulate_leak_table(n, &[n * n * n], 20_000, 3).unwrap();
        let row = &table.rows[0];
        assert!(row.mean_rho.abs() < 0.05, "mean rho {}", row.mean_rho);
        for k in 1..=n {
            let want = 1.0 - k as f64 / n as f64;
            assert!(
                (row.leak_freq[k - 1] - want).abs() < 0.02,
                "k={k}: {} vs {want}",
                row.leak_freq[k - 1]
            );
        }
    }

    #[test]
    fn leak_rows_keyed_by_p_value() {
        let full = simulate_leak_table(5, &[0, 3, 9], 2_000, 4).unwrap();
        let solo = simulate_leak_table(5, &[9], 2_000, 4).unwrap();
        assert_eq!(full.rows[2], solo.rows[0]);
    }

    #[test]
    fn geometric_grid_shape() {
        let grid = geometric_p_grid(10, 1.12).unwrap();
        assert_eq!(grid[0], 0);
        assert_eq!(*grid.last().unwrap(), 1000);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
        assert!(geometric_p_grid(10, 1.0).is_err());
        assert!(geometric_p_grid(1, 1.5).is_err());
    }

    #[test]
    fn dictionary_identity_bucket_and_full_tolerance() {
        let dict = quick_dictionary(10, &[0.05, 0.3, 1.0], 7);
        let top = dict.buckets() - 1;
        for ai in 0..dict.alphas().len() {
            assert_eq!(dict.k_at(ai, top), 1, "alpha {}", dict.alphas()[ai]);
        }
        let full = dict.alphas().iter().position(|&a| a == 1.0).unwrap();
        for b in 0..dict.buckets() {
            assert_eq!(dict.k_at(full, b), 1);
        }
    }

    #[test]
    fn dictionary_uniform_bucket_near_half_arms() {
        let dict = quick_dictionary(10, &[0.5], 8);
        let k = dict.k_at(0, 0);
        assert!((k as i64 - 5).abs() <= 1, "k {k}");
    }

    #[test]
    fn dictionary_monotone_in_rho_and_alpha() {
        let dict = quick_dictionary(8, &[0.05, 0.2, 0.5, 0.9], 9);
        for ai in 0..dict.alphas().len() {
            for b in 1..dict.buckets() {
                assert!(dict.k_at(ai, b) <= dict.k_at(ai, b - 1));
            }
        }
        for ai in 1..dict.alphas().len() {
            for b in 0..dict.buckets() {
                assert!(dict.k_at(ai, b) <= dict.k_at(ai - 1, b));
            }
        }
    }

    #[test]
    fn dictionary_rejects_sparse_table() {
        let table = simulate_leak_table(10, &[0, 1000], 2_000, 10).unwrap();
        match build_dictionary(&table, &[0.5]) {
            Err(Error::InsufficientGrid { max_gap, limit }) => {
                assert!(max_gap > limit);
            }
            other => panic!("expected grid error, got {other:?}"),
        }
    }

    #[test]
    fn dictionary_file_roundtrip_is_canonical() {
        let dict = quick_dictionary(5, &[0.1, 0.5], 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("leak.dict");
        dict.save(&path).unwrap();
        let loaded = LeakDictionary::load(&path).unwrap();
        assert_eq!(loaded, dict);
        assert_eq!(loaded.to_text(), dict.to_text());
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes, dict.to_text().into_bytes());
    }

    #[test]
    fn dictionary_parse_rejects_corruption() {
        let dict = quick_dictionary(5, &[0.5], 12);
        let text = dict.to_text();
        assert!(LeakDictionary::from_text(&text.replace("v1", "v9"), "t").is_err());
        assert!(LeakDictionary::from_text(&text.replace("end\n", ""), "t").is_err());
        let tampered = text.replace("rows 21", "rows 20");
        assert!(LeakDictionary::from_text(&tampered, "t").is_err());
    }

    #[test]
    fn query_follows_fallback_rule() {
        let dict = quick_dictionary(10, &[0.2, 0.5], 13);
        assert_eq!(dict.query_k(0.5, 1.0), 1);
        let low = dict.query_decision(0.5, -0.3);
        assert!(low.fallback);
        assert_eq!(low.k, 10);
        let mid = dict.query_decision(0.5, 0.75);
        assert!(mid.k < 5, "k {}", mid.k);
        assert!(!mid.fallback);
    }

    #[test]
    fn query_uses_nearest_alpha() {
        let dict = quick_dictionary(10, &[0.1, 0.5], 14);
        assert_eq!(dict.query_raw(0.15, 0.6), dict.query_raw(0.1, 0.6));
        assert_eq!(dict.query_raw(0.45, 0.6), dict.query_raw(0.5, 0.6));
    }

    #[test]
    fn filter_examples() {
        assert_eq!(ec_filter(&[0.9, 0.1, 0.5], 3).unwrap(), vec![true; 3]);
        assert_eq!(ec_filter(&[0.9, 0.1, 0.5], 1).unwrap(), vec![true, false, false]);
        assert_eq!(ec_filter(&[0.5, 0.5, 0.2], 1).unwrap(), vec![true, true, false]);
        assert!(ec_filter(&[0.5, 0.5], 0).is_err());
        assert!(ec_filter(&[0.5, 0.5], 3).is_err());
        assert!(ec_filter::<f64>(&[], 1).is_err());
    }

    #[test]
    fn filter_keeps_at_least_k() {
        let mut r = rng(15);
        for _ in 0..200 {
            let m = r.random_range(1..9);
            let scores: Vec<f64> = (0..m).map(|_| (r.random::<f64>() * 4.0).floor() / 4.0).collect();
            let k = r.random_range(1..=m);
            let mask = ec_filter(&scores, k).unwrap();
            assert!(mask.iter().filter(|&&b| b).count() >= k);
        }
    }

    #[test]
    fn pinned_controller_matches_bare_bandit() {
        let kb_config = KBootConfig {
            k: 5,
            epsilon: 0.05,
            seed: 42,
        };
        let arms = 5;
        let dict = quick_dictionary(arms, &[0.5], 16);
        let ec_config = EcConfig {
            alpha: 0.5,
            k0: arms,
            update_period: 0,
        };
        let mut bare: KBoot<f64> = KBoot::new(arms, kb_config).unwrap();
        let mut controlled =
            EcController::new(KBoot::<f64>::new(arms, kb_config).unwrap(), dict, ec_config)
                .unwrap();
        let mut script = rng(17);
        for _ in 0..120 {
            let x = [script.random::<f64>(), script.random::<f64>()];
            let scores: Vec<f64> = (0..arms).map(|_| script.random()).collect();
            let a = bare.choose(&x).unwrap();
            let b = controlled.choose(&x, &scores).unwrap();
            assert_eq!(a, b);
            let reward = x[0] * 0.5 + if a == 1 { 0.3 } else { 0.0 };
            bare.update(a, &x, reward).unwrap();
            controlled.update(&x, reward).unwrap();
        }
        assert!(controlled.history().is_empty());
        assert_eq!(controlled.current_k(), arms);
    }

    #[test]
    fn controller_refreshes_on_schedule() {
        let arms = 5;
        let dict = quick_dictionary(arms, &[0.3], 18);
        let config = EcConfig {
            alpha: 0.3,
            k0: arms,
            update_period: 10,
        };
        let bandit: KBoot<f64> = KBoot::new(arms, KBootConfig::default()).unwrap();
        let mut ec = EcController::new(bandit, dict, config).unwrap();
        let mut r = rng(19);
        for _ in 0..35 {
            let x = [r.random::<f64>()];
            let scores: Vec<f64> = (0..arms).map(|_| r.random()).collect();
            let arm = ec.choose(&x, &scores).unwrap();
            let reward = scores[arm] * 0.8 + 0.1 * r.random::<f64>();
            ec.update(&x, reward).unwrap();
        }
        let rounds: Vec<usize> = ec.history().iter().map(|h| h.round).collect();
        assert_eq!(rounds, vec![10, 20, 30]);
        for h in ec.history() {
            assert!(h.k >= 1 && h.k <= arms);
            assert!(h.raw_k >= 1 && h.raw_k <= arms);
            assert_eq!(h.fallback, h.raw_k as f64 >= (1.0 - 0.3) * arms as f64);
        }
        assert_eq!(ec.correlation_pairs().len(), 35);
    }

    #[test]
    fn controller_enforces_choose_update_alternation() {
        let arms = 5;
        let dict = quick_dictionary(arms, &[0.5], 20);
        let bandit: KBoot<f64> = KBoot::new(arms, KBootConfig::default()).unwrap();
        let mut ec =
            EcController::new(bandit, dict, EcConfig::with_defaults(0.5, arms)).unwrap();
        assert!(ec.update(&[0.0], 1.0).is_err());
        let scores = [0.1, 0.2, 0.3, 0.4, 0.5];
        ec.choose(&[0.0], &scores).unwrap();
        assert!(ec.choose(&[0.0], &scores).is_err());
        ec.update(&[0.0], 1.0).unwrap();
        assert!(ec.choose(&[0.0], &scores[..2]).is_err());
    }

    #[test]
    fn controller_validates_construction() {
        let dict = quick_dictionary(5, &[0.5], 21);
        let mk = || KBoot::<f64>::new(5, KBootConfig::default()).unwrap();
        assert!(EcController::new(
            mk(),
            quick_dictionary(6, &[0.5], 21),
            EcConfig::with_defaults(0.5, 5)
        )
        .is_err());
        assert!(EcController::new(
            mk(),
            dict.clone(),
            EcConfig {
                alpha: 1.5,
                k0: 5,
                update_period: 50
            }
        )
        .is_err());
        assert!(EcController::new(
            mk(),
            dict,
            EcConfig {
                alpha: 0.5,
                k0: 0,
                update_period: 50
            }
        )
        .is_err());
    }
}
