//! Reproducible experiment harness: TOML-described experiments, parallel
//! seeded runs, per-round aggregation, and CSV/JSON/SVG export.
//!
//! Every run derives its generator seed as `base_seed + run_index` and
//! splits randomness across fixed ChaCha8 streams: 0 environment, 1 policy,
//! 2 noise calibration, 3 eligibility scores, 4 dataset splitting. Two runs
//! of the same configuration therefore produce identical traces.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{top1_policy, uniform_policy, LinUcb, LinUcbConfig};
use crate::eligibility::{EcConfig, EcController, LeakDictionary, ThresholdRefresh};
use crate::envs::{
    calibrate_sigma_e, dataset_to_runs, load_dataset, regret_vs_best, ClassificationDataset,
    DatasetSchema, EligibilitySim, RewardFamily, RoundSample, SyntheticEnv, CALIBRATION_ROUNDS,
};
use crate::error::{Error, Result};
use crate::kboot::{FilterableBandit, KBoot, KBootConfig};
use crate::mathfn::quantile;

/// Which decision rule an experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "kboot")]
    KBoot,
    #[serde(rename = "kboot+ec")]
    KBootEc,
    #[serde(rename = "linucb")]
    LinUcb,
    #[serde(rename = "linucb+ec")]
    LinUcbEc,
    #[serde(rename = "top1")]
    Top1,
    #[serde(rename = "uniform")]
    Uniform,
}

impl PolicyKind {
    fn name(self) -> &'static str {
        match self {
            PolicyKind::KBoot => "kboot",
            PolicyKind::KBootEc => "kboot+ec",
            PolicyKind::LinUcb => "linucb",
            PolicyKind::LinUcbEc => "linucb+ec",
            PolicyKind::Top1 => "top1",
            PolicyKind::Uniform => "uniform",
        }
    }
}

/// Environment class an experiment runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Synthetic,
    Classification,
}

/// Round and run counts plus the base seed runs are numbered from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub rounds: usize,
    pub runs: usize,
    pub base_seed: u64,
}

/// Policy choice and its hyperparameters. Fields left unset fall back to
/// the policy's defaults; fields that do not belong to the chosen kind are
/// rejected at validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_ucb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_risk: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update_period: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores_in_context: Option<bool>,
}

impl PolicySection {
    pub fn is_kboot(&self) -> bool {
        matches!(self.kind, PolicyKind::KBoot | PolicyKind::KBootEc)
    }

    pub fn is_linucb(&self) -> bool {
        matches!(self.kind, PolicyKind::LinUcb | PolicyKind::LinUcbEc)
    }

    pub fn is_ec(&self) -> bool {
        matches!(self.kind, PolicyKind::KBootEc | PolicyKind::LinUcbEc)
    }

    pub fn kboot_config(&self, seed: u64) -> KBootConfig {
        KBootConfig {
            k: self.k.unwrap_or(20),
            epsilon: self.epsilon.unwrap_or(0.01),
            seed,
        }
    }

    pub fn linucb_config(&self, seed: u64) -> LinUcbConfig {
        LinUcbConfig {
            alpha_ucb: self.alpha_ucb.unwrap_or(10.0),
            seed,
        }
    }

    pub fn ec_config(&self, arms: usize) -> Result<EcConfig> {
        let alpha = self
            .alpha_risk
            .ok_or_else(|| Error::config("policy.alpha_risk is required for eligibility control"))?;
        Ok(EcConfig {
            alpha,
            k0: self.k0.unwrap_or(arms),
            update_period: self.update_period.unwrap_or(50),
        })
    }
}

/// Eligibility-score generation: either a target rank correlation to
/// calibrate the score noise against, or an explicit noise level.
///
/// Calibration redraws the simulator's score weights (bounded attempts)
/// when a drawn vector cannot reach the target at zero noise, so any
/// positive target below the weight model's reach stays satisfiable for
/// every run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EligibilitySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_e: Option<f64>,
}

/// Classification dataset location and schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    #[serde(default = "default_delimiter", skip_serializing_if = "is_comma")]
    pub delimiter: char,
    #[serde(default)]
    pub has_header: bool,
    pub label_col: usize,
    #[serde(default)]
    pub resample_if_short: bool,
    #[serde(default)]
    pub zscore: bool,
}

fn default_delimiter() -> char {
    ','
}

#[allow(clippy::trivially_copy_pass_by_ref)]
fn is_comma(c: &char) -> bool {
    *c == ','
}

impl DatasetSection {
    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            delimiter: self.delimiter,
            has_header: self.has_header,
            label_col: self.label_col,
        }
    }
}

/// Environment description. Synthetic envs take arms/dim/reward_family;
/// classification envs take a dataset and derive both arm count and
/// context dimension from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arms: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_family: Option<RewardFamily>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eligibility: Option<EligibilitySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSection>,
}

/// Export format selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
    Svg,
}

/// Where and how results are written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub formats: Vec<OutputFormat>,
    #[serde(default)]
    pub per_run_columns: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<String>,
}

impl OutputSection {
    pub fn formats(&self) -> Vec<OutputFormat> {
        if self.formats.is_empty() {
            vec![OutputFormat::Csv, OutputFormat::Json]
        } else {
            self.formats.clone()
        }
    }

    pub fn stem(&self) -> &str {
        self.stem.as_deref().unwrap_or("results")
    }
}

/// Grid of values to cross: every target_rho is paired with every
/// alpha_risk, one experiment per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_rho: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha_risk: Vec<f64>,
}

/// A full experiment description, normally parsed from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub policy: PolicySection,
    pub env: EnvSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    ///
    /// # Errors
    /// `Config` describing the offending key for syntax, unknown-field, and
    /// semantic problems alike.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file, resolving relative dictionary and dataset
    /// paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        if let Some(parent) = path.parent() {
            config.resolve_paths(parent);
        }
        Ok(config)
    }

    /// Rebases relative dictionary and dataset paths onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(dict) = &mut self.policy.dictionary {
            if dict.is_relative() {
                *dict = base.join(&*dict);
            }
        }
        if let Some(ds) = &mut self.env.dataset {
            if ds.path.is_relative() {
                ds.path = base.join(&ds.path);
            }
        }
    }

    /// Serializes back to TOML.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Whether eligibility scores are appended to the context vector.
    /// Defaults on for LinUCB variants whenever a score model is
    /// configured, off otherwise.
    pub fn scores_in_context(&self) -> bool {
        self.policy
            .scores_in_context
            .unwrap_or(self.policy.is_linucb() && self.env.eligibility.is_some())
    }

    /// Whether any part of the experiment consumes eligibility scores.
    pub fn needs_scores(&self) -> bool {
        self.policy.is_ec() || self.policy.kind == PolicyKind::Top1 || self.scores_in_context()
    }

    /// Checks structural consistency: counts are positive, every set field
    /// belongs to the chosen policy and environment, score-consuming
    /// policies have a score model, and each sweep cell is itself valid.
    ///
    /// # Errors
    /// `Config` naming the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.experiment.rounds == 0 {
            return Err(Error::config("experiment.rounds must be at least 1"));
        }
        if self.experiment.runs == 0 {
            return Err(Error::config("experiment.runs must be at least 1"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.target_rho.is_empty() && sweep.alpha_risk.is_empty() {
                return Err(Error::config(
                    "sweep section is present but both sweep.target_rho and \
                     sweep.alpha_risk are empty",
                ));
            }
            if !sweep.target_rho.is_empty() {
                if self.env.kind != EnvKind::Synthetic {
                    return Err(Error::config(
                        "sweep.target_rho requires a synthetic env (noise \
                         calibration replays the reward model)",
                    ));
                }
                let consumes = self.policy.is_ec()
                    || self.policy.kind == PolicyKind::Top1
                    || self
                        .policy
                        .scores_in_context
                        .unwrap_or(self.policy.is_linucb());
                if !consumes {
                    return Err(Error::config(format!(
                        "sweep.target_rho has no effect: policy '{}' never \
                         consumes eligibility scores",
                        self.policy.kind.name()
                    )));
                }
            }
            if !sweep.alpha_risk.is_empty() && !self.policy.is_ec() {
                return Err(Error::config(format!(
                    "sweep.alpha_risk is only valid for eligibility-control \
                     policies, not '{}'",
                    self.policy.kind.name()
                )));
            }
        }
        for (cell, _) in self.expand_cells() {
            cell.validate_cell()?;
        }
        Ok(())
    }

    /// Expands the sweep grid into standalone validated configs, paired
    /// with a short cell label ("rho0.3_alpha0.5"). Without a sweep section
    /// the config itself is returned with an empty label.
    pub fn expand_sweep(&self) -> Result<Vec<(ExperimentConfig, String)>> {
        let cells = self.expand_cells();
        for (cell, _) in &cells {
            cell.validate_cell()?;
        }
        Ok(cells)
    }

    fn expand_cells(&self) -> Vec<(ExperimentConfig, String)> {
        let Some(sweep) = &self.sweep else {
            return vec![(self.clone(), String::new())];
        };
        let rhos: Vec<Option<f64>> = if sweep.target_rho.is_empty() {
            vec![None]
        } else {
            sweep.target_rho.iter().copied().map(Some).collect()
        };
        let alphas: Vec<Option<f64>> = if sweep.alpha_risk.is_empty() {
            vec![None]
        } else {
            sweep.alpha_risk.iter().copied().map(Some).collect()
        };
        let mut cells = Vec::with_capacity(rhos.len() * alphas.len());
        for &rho in &rhos {
            for &alpha in &alphas {
                let mut cell = self.clone();
                cell.sweep = None;
                let mut parts = Vec::new();
                if let Some(rho) = rho {
                    cell.env.eligibility = Some(EligibilitySection {
                        target_rho: Some(rho),
                        sigma_e: None,
                    });
                    parts.push(format!("rho{rho}"));
                }
                if let Some(alpha) = alpha {
                    cell.policy.alpha_risk = Some(alpha);
                    parts.push(format!("alpha{alpha}"));
                }
                cells.push((cell, parts.join("_")));
            }
        }
        cells
    }

    fn validate_cell(&self) -> Result<()> {
        self.validate_env()?;
        self.validate_policy()
    }

    fn validate_env(&self) -> Result<()> {
        match self.env.kind {
            EnvKind::Synthetic => {
                if self.env.dataset.is_some() {
                    return Err(Error::config(
                        "env.dataset is only valid for classification envs",
                    ));
                }
                match self.env.arms {
                    None => return Err(Error::config("env.arms is required for synthetic envs")),
                    Some(0) => return Err(Error::config("env.arms must be at least 1")),
                    Some(_) => {}
                }
                match self.env.dim {
                    None => return Err(Error::config("env.dim is required for synthetic envs")),
                    Some(0) => return Err(Error::config("env.dim must be at least 1")),
                    Some(_) => {}
                }
                if self.env.reward_family.is_none() {
                    return Err(Error::config(
                        "env.reward_family is required for synthetic envs",
                    ));
                }
            }
            EnvKind::Classification => {
                if self.env.dataset.is_none() {
                    return Err(Error::config(
                        "env.dataset is required for classification envs",
                    ));
                }
                for (set, key) in [
                    (self.env.arms.is_some(), "env.arms"),
                    (self.env.dim.is_some(), "env.dim"),
                    (self.env.reward_family.is_some(), "env.reward_family"),
                ] {
                    if set {
                        return Err(Error::config(format!(
                            "{key} is derived from the dataset; remove it"
                        )));
                    }
                }
            }
        }
        if let Some(elig) = &self.env.eligibility {
            match (elig.target_rho, elig.sigma_e) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(Error::config(
                        "env.eligibility needs exactly one of target_rho, sigma_e",
                    ));
                }
                (Some(rho), None) => {
                    if !(rho > 0.0 && rho < 1.0) {
                        return Err(Error::config(format!(
                            "env.eligibility.target_rho must lie strictly inside (0,1), got {rho}"
                        )));
                    }
                    if self.env.kind == EnvKind::Classification {
                        return Err(Error::config(
                            "env.eligibility.target_rho requires a synthetic env \
                             (noise calibration replays the reward model); set \
                             sigma_e directly instead",
                        ));
                    }
                }
                (None, Some(sigma)) => {
                    if !sigma.is_finite() || sigma < 0.0 {
                        return Err(Error::config(format!(
                            "env.eligibility.sigma_e must be finite and nonnegative, got {sigma}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn validate_policy(&self) -> Result<()> {
        let p = &self.policy;
        let kind = p.kind.name();
        for (set, key, allowed) in [
            (p.k.is_some(), "policy.k", p.is_kboot()),
            (p.epsilon.is_some(), "policy.epsilon", p.is_kboot()),
            (p.alpha_ucb.is_some(), "policy.alpha_ucb", p.is_linucb()),
            (p.alpha_risk.is_some(), "policy.alpha_risk", p.is_ec()),
            (p.k0.is_some(), "policy.k0", p.is_ec()),
            (p.update_period.is_some(), "policy.update_period", p.is_ec()),
            (p.dictionary.is_some(), "policy.dictionary", p.is_ec()),
            (
                p.scores_in_context.is_some(),
                "policy.scores_in_context",
                p.is_kboot() || p.is_linucb(),
            ),
        ] {
            if set && !allowed {
                return Err(Error::config(format!(
                    "{key} does not apply to policy '{kind}'"
                )));
            }
        }
        if let Some(k) = p.k {
            if k == 0 {
                return Err(Error::config("policy.k must be at least 1"));
            }
        }
        if let Some(eps) = p.epsilon {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Error::config(format!(
                    "policy.epsilon must lie strictly inside (0,1), got {eps}"
                )));
            }
        }
        if let Some(a) = p.alpha_ucb {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::config(format!(
                    "policy.alpha_ucb must be positive and finite, got {a}"
                )));
            }
        }
        if p.is_ec() {
            if p.dictionary.is_none() {
                return Err(Error::config(format!(
                    "policy.dictionary is required for policy '{kind}'"
                )));
            }
            match p.alpha_risk {
                None => {
                    return Err(Error::config(format!(
                        "policy.alpha_risk is required for policy '{kind}'"
                    )));
                }
                Some(a) if !(0.0..=1.0).contains(&a) => {
                    return Err(Error::config(format!(
                        "policy.alpha_risk must lie in [0,1], got {a}"
                    )));
                }
                Some(_) => {}
            }
            if p.k0 == Some(0) {
                return Err(Error::config("policy.k0 must be at least 1"));
            }
        }
        if self.needs_scores() && self.env.eligibility.is_none() {
            return Err(Error::config(format!(
                "policy '{kind}' consumes eligibility scores; add an \
                 [env.eligibility] section"
            )));
        }
        Ok(())
    }
}

/// One decision round of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    pub arm: usize,
    pub reward: f64,
    pub regret: f64,
    /// Active eligibility threshold during the round; None without EC.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

/// Serializable mirror of a threshold refresh event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcRefresh {
    pub round: usize,
    pub rho_hat: f64,
    pub degenerate: bool,
    pub raw_k: usize,
    pub k: usize,
    pub fallback: bool,
}

impl From<ThresholdRefresh> for EcRefresh {
    fn from(r: ThresholdRefresh) -> Self {
        EcRefresh {
            round: r.round,
            rho_hat: r.rho_hat,
            degenerate: r.degenerate,
            raw_k: r.raw_k,
            k: r.k,
            fallback: r.fallback,
        }
    }
}

/// Full trace of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
    pub cumulative_regret: f64,
    /// 1 - cumulative_regret / rounds; set for classification envs where
    /// reward is the 0/1 correctness indicator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Threshold refresh events, present for eligibility-control runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ec_refreshes: Option<Vec<EcRefresh>>,
}

impl RunResult {
    /// Running sum of per-round regret, one entry per round.
    pub fn cumulative_curve(&self) -> Vec<f64> {
        let mut sum = 0.0;
        self.rounds
            .iter()
            .map(|r| {
                sum += r.regret;
                sum
            })
            .collect()
    }
}

enum EnvState<'a> {
    Synthetic(Box<SyntheticEnv<f64>>),
    Replay {
        dataset: &'a ClassificationDataset<f64>,
        order: &'a [usize],
        cursor: usize,
    },
}

impl EnvState<'_> {
    fn next_round(&mut self) -> Result<RoundSample<f64>> {
        match self {
            EnvState::Synthetic(env) => Ok(env.round()),
            EnvState::Replay {
                dataset,
                order,
                cursor,
            } => {
                let row = *order.get(*cursor).ok_or(Error::IndexOutOfRange {
                    index: *cursor,
                    len: order.len(),
                })?;
                *cursor += 1;
                let mut one_hot = vec![0.0; dataset.n_classes];
                one_hot[dataset.labels[row]] = 1.0;
                Ok(RoundSample {
                    context: dataset.features[row].clone(),
                    mean_rewards: one_hot.clone(),
                    noisy_rewards: one_hot,
                })
            }
        }
    }
}

enum PolicyState {
    KBoot(KBoot<f64>),
    KBootEc(Box<EcController<f64, KBoot<f64>>>),
    LinUcb(LinUcb<f64>),
    LinUcbEc(Box<EcController<f64, LinUcb<f64>>>),
    Top1(ChaCha8Rng),
    Uniform(ChaCha8Rng),
}

fn policy_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// A config with its referenced files loaded and per-run row orders fixed,
/// ready to execute.
#[derive(Debug)]
pub struct Experiment {
    config: ExperimentConfig,
    dictionary: Option<LeakDictionary>,
    dataset: Option<ClassificationDataset<f64>>,
    orders: Vec<Vec<usize>>,
}

impl Experiment {
    /// Validates the config and loads everything it references: the leak
    /// dictionary for EC policies, and for classification envs the dataset
    /// plus the per-run row order (stream 4 of the base seed, so every run
    /// replays a fixed slice).
    ///
    /// # Errors
    /// Any validation, parse, or I/O error; `Config` when a sweep section
    /// is still present (expand it first) or the dictionary was built for
    /// a different arm count.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        if config.sweep.is_some() {
            return Err(Error::config(
                "sweep configs describe a grid of experiments; expand_sweep() \
                 them and prepare each cell",
            ));
        }
        let dictionary = match &config.policy.dictionary {
            Some(path) => Some(LeakDictionary::load(path)?),
            None => None,
        };
        let (dataset, orders) = match &config.env.dataset {
            Some(section) => {
                let mut ds = load_dataset::<f64>(&section.path, &section.schema())?;
                if section.zscore {
                    ds.zscore();
                }
                let orders = dataset_to_runs(
                    &ds,
                    config.experiment.rounds,
                    config.experiment.runs,
                    config.experiment.base_seed,
                    section.resample_if_short,
                )?;
                (Some(ds), orders)
            }
            None => (None, Vec::new()),
        };
        let experiment = Experiment {
            config,
            dictionary,
            dataset,
            orders,
        };
        if let Some(dict) = &experiment.dictionary {
            let arms = experiment.arms();
            if dict.seq_len() != arms {
                return Err(Error::config(format!(
                    "policy.dictionary was built for {} arms but the env has {arms}",
                    dict.seq_len()
                )));
            }
        }
        Ok(experiment)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    /// Arm count: configured for synthetic envs, class count for replays.
    pub fn arms(&self) -> usize {
        match &self.dataset {
            Some(ds) => ds.n_classes,
            None => self.config.env.arms.unwrap_or(0),
        }
    }

    /// Raw context dimension before any score concatenation.
    pub fn context_dim(&self) -> usize {
        match &self.dataset {
            Some(ds) => ds.dim(),
            None => self.config.env.dim.unwrap_or(0),
        }
    }

    /// Executes run `run_index` with seed `base_seed + run_index`.
    ///
    /// # Errors
    /// Construction errors as-is; failures inside the round loop wrapped
    /// in `Round` with the 1-based round number.
    pub fn run_one(&self, run_index: usize) -> Result<RunResult> {
        let runs = self.config.experiment.runs;
        if run_index >= runs {
            return Err(Error::IndexOutOfRange {
                index: run_index,
                len: runs,
            });
        }
        let seed = self.config.experiment.base_seed + run_index as u64;
        let rounds = self.config.experiment.rounds;
        let arms = self.arms();

        let mut env = match (&self.dataset, &self.config.env) {
            (Some(ds), _) => EnvState::Replay {
                dataset: ds,
                order: &self.orders[run_index],
                cursor: 0,
            },
            (None, section) => EnvState::Synthetic(Box::new(SyntheticEnv::new(
                section.arms.unwrap_or(0),
                section.dim.unwrap_or(0),
                section.reward_family.unwrap_or(RewardFamily::Linear),
                seed,
            )?)),
        };

        let mut sim = if self.config.needs_scores() {
            let mut sim = EligibilitySim::<f64>::new(arms, seed)?;
            let elig = self.config.env.eligibility.as_ref().ok_or_else(|| {
                Error::config("score-consuming policy without [env.eligibility]")
            })?;
            let sigma = match (elig.sigma_e, elig.target_rho, &env) {
                (Some(sigma), _, _) => sigma,
                (None, Some(rho), EnvState::Synthetic(env)) => {
                    let mut attempts = 0;
                    loop {
                        match calibrate_sigma_e(env, sim.weights(), rho, CALIBRATION_ROUNDS, seed)
                        {
                            Ok(sigma) => break sigma,
                            Err(Error::NonBracketing { .. }) if attempts < 32 => {
                                attempts += 1;
                                sim.redraw_weights();
                            }
                            Err(e) => return Err(e),
                        }
                    }
                }
                (None, _, _) => {
                    return Err(Error::config(
                        "env.eligibility must set target_rho or sigma_e",
                    ));
                }
            };
            sim.set_sigma_e(sigma)?;
            Some(sim)
        } else {
            None
        };

        let scores_in_context = self.config.scores_in_context();
        let ctx_dim = self.context_dim() + if scores_in_context { arms } else { 0 };
        let mut policy = match self.config.policy.kind {
            PolicyKind::KBoot => {
                PolicyState::KBoot(KBoot::new(arms, self.config.policy.kboot_config(seed))?)
            }
            PolicyKind::KBootEc => {
                let bandit = KBoot::new(arms, self.config.policy.kboot_config(seed))?;
                let dict = self.dictionary.clone().expect("dictionary loaded at prepare");
                PolicyState::KBootEc(Box::new(EcController::new(
                    bandit,
                    dict,
                    self.config.policy.ec_config(arms)?,
                )?))
            }
            PolicyKind::LinUcb => PolicyState::LinUcb(LinUcb::new(
                arms,
                ctx_dim,
                self.config.policy.linucb_config(seed),
            )?),
            PolicyKind::LinUcbEc => {
                let bandit = LinUcb::new(arms, ctx_dim, self.config.policy.linucb_config(seed))?;
                let dict = self.dictionary.clone().expect("dictionary loaded at prepare");
                PolicyState::LinUcbEc(Box::new(EcController::new(
                    bandit,
                    dict,
                    self.config.policy.ec_config(arms)?,
                )?))
            }
            PolicyKind::Top1 => PolicyState::Top1(policy_rng(seed)),
            PolicyKind::Uniform => PolicyState::Uniform(policy_rng(seed)),
        };

        let mut records = Vec::with_capacity(rounds);
        let mut cumulative_regret = 0.0;
        for round in 1..=rounds {
            let mut step = || -> Result<RoundRecord> {
                let sample = env.next_round()?;
                let scores = match &mut sim {
                    Some(sim) => Some(sim.scores(&sample.noisy_rewards)?),
                    None => None,
                };
                let query: Vec<f64> = if scores_in_context {
                    let scores = scores.as_deref().expect("validated score model");
                    sample.context.iter().chain(scores).copied().collect()
                } else {
                    sample.context.clone()
                };
                let (arm, k) = match &mut policy {
                    PolicyState::KBoot(bandit) => (bandit.choose(&query)?, None),
                    PolicyState::KBootEc(ec) => {
                        let scores = scores.as_deref().expect("validated score model");
                        let arm = ec.choose(&query, scores)?;
                        (arm, Some(ec.current_k()))
                    }
                    PolicyState::LinUcb(bandit) => (bandit.choose(&query)?, None),
                    PolicyState::LinUcbEc(ec) => {
                        let scores = scores.as_deref().expect("validated score model");
                        let arm = ec.choose(&query, scores)?;
                        (arm, Some(ec.current_k()))
                    }
                    PolicyState::Top1(rng) => {
                        let scores = scores.as_deref().expect("validated score model");
                        (top1_policy(scores, rng)?, None)
                    }
                    PolicyState::Uniform(rng) => (uniform_policy(arms, rng)?, None),
                };
                let reward = sample.noisy_rewards[arm];
                let regret = regret_vs_best(&sample.mean_rewards, arm)?;
                match &mut policy {
                    PolicyState::KBoot(bandit) => bandit.update(arm, &query, reward)?,
                    PolicyState::KBootEc(ec) => ec.update(&query, reward)?,
                    PolicyState::LinUcb(bandit) => bandit.update(arm, &query, reward)?,
                    PolicyState::LinUcbEc(ec) => ec.update(&query, reward)?,
                    PolicyState::Top1(_) | PolicyState::Uniform(_) => {}
                }
                Ok(RoundRecord {
                    round,
                    arm,
                    reward,
                    regret,
                    k,
                })
            };
            let record = step().map_err(|e| e.at_round(round))?;
            cumulative_regret += record.regret;
            records.push(record);
        }

        let accuracy = self
            .dataset
            .as_ref()
            .map(|_| 1.0 - cumulative_regret / rounds as f64);
        let ec_refreshes = match &policy {
            PolicyState::KBootEc(ec) => {
                Some(ec.history().iter().copied().map(EcRefresh::from).collect())
            }
            PolicyState::LinUcbEc(ec) => {
                Some(ec.history().iter().copied().map(EcRefresh::from).collect())
            }
            _ => None,
        };
        Ok(RunResult {
            seed,
            rounds: records,
            cumulative_regret,
            accuracy,
            ec_refreshes,
        })
    }

    /// Executes every run in parallel, returned in run-index order.
    pub fn run_all(&self) -> Result<Vec<RunResult>> {
        (0..self.config.experiment.runs)
            .into_par_iter()
            .map(|i| self.run_one(i))
            .collect()
    }
}

/// Prepares and executes a config in one call.
pub fn run_all(config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    Experiment::prepare(config.clone())?.run_all()
}

/// Cross-run summary of cumulative regret at one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: usize,
    pub mean: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Per-round mean and 10th/90th percentiles of cumulative regret across
/// runs. Percentiles interpolate order statistics the same way the rest of
/// the crate does, so a single run collapses to mean = p10 = p90.
///
/// # Errors
/// `EmptyInput` without runs; `DimensionMismatch` when round counts differ.
pub fn aggregate(results: &[RunResult]) -> Result<Vec<SummaryRow>> {
    if results.is_empty() {
        return Err(Error::EmptyInput("aggregate needs at least one run"));
    }
    let rounds = results[0].rounds.len();
    for r in results {
        if r.rounds.len() != rounds {
            return Err(Error::DimensionMismatch {
                expected: rounds,
                got: r.rounds.len(),
            });
        }
    }
    let curves: Vec<Vec<f64>> = results.iter().map(RunResult::cumulative_curve).collect();
    let mut summary = Vec::with_capacity(rounds);
    let mut sorted = vec![0.0f64; results.len()];
    for t in 0..rounds {
        for (v, curve) in sorted.iter_mut().zip(&curves) {
            *v = curve[t];
        }
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite regret"));
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        summary.push(SummaryRow {
            round: t + 1,
            mean,
            p10: quantile(&sorted, 0.1)?,
            p90: quantile(&sorted, 0.9)?,
        });
    }
    Ok(summary)
}

/// Everything a finished experiment produced, as written to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub metadata: ReportMetadata,
    pub seeds: Vec<u64>,
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<RunResult>,
}

/// Provenance notes for a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    /// How regret was scored; always the gap between noiseless mean
    /// rewards of the best and the chosen arm.
    pub regret_oracle: String,
}

/// Bundles results into a report, computing the summary.
pub fn build_report(config: &ExperimentConfig, results: Vec<RunResult>) -> Result<ExperimentReport> {
    let summary = aggregate(&results)?;
    Ok(ExperimentReport {
        config: config.clone(),
        metadata: ReportMetadata {
            regret_oracle: "noiseless_mean".to_string(),
        },
        seeds: results.iter().map(|r| r.seed).collect(),
        summary,
        runs: results,
    })
}

fn create_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Writes the per-round summary as CSV: a `round,mean,p10,p90` header and
/// one row per round. With `per_run` the cumulative-regret curve of each
/// run is appended as extra `run<i>` columns.
pub fn write_summary_csv(
    path: &Path,
    summary: &[SummaryRow],
    per_run: Option<&[RunResult]>,
) -> Result<()> {
    let curves: Vec<Vec<f64>> = per_run
        .map(|runs| runs.iter().map(RunResult::cumulative_curve).collect())
        .unwrap_or_default();
    for curve in &curves {
        if curve.len() != summary.len() {
            return Err(Error::DimensionMismatch {
                expected: summary.len(),
                got: curve.len(),
            });
        }
    }
    let mut out = String::new();
    out.push_str("round,mean,p10,p90");
    for i in 0..curves.len() {
        out.push_str(&format!(",run{i}"));
    }
    out.push('\n');
    for (t, row) in summary.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}", row.round, row.mean, row.p10, row.p90));
        for curve in &curves {
            out.push_str(&format!(",{}", curve[t]));
        }
        out.push('\n');
    }
    let mut file = create_file(path)?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes a report as pretty-printed JSON. `read_json_report` restores it
/// exactly: all floats serialize in shortest round-trip form.
pub fn write_json_report(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::config(e.to_string()))?;
    text.push('\n');
    let mut file = create_file(path)?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a report written by `write_json_report`.
pub fn read_json_report(path: &Path) -> Result<ExperimentReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(e.to_string()))
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

/// Writes a static SVG line chart of the summary: the mean cumulative
/// regret as a line over a shaded p10..p90 band. Long experiments are
/// thinned to at most 1000 points per path.
pub fn write_svg_chart(path: &Path, summary: &[SummaryRow], title: &str) -> Result<()> {
    if summary.is_empty() {
        return Err(Error::EmptyInput("chart needs at least one round"));
    }
    const W: f64 = 800.0;
    const H: f64 = 480.0;
    const L: f64 = 78.0;
    const R: f64 = 24.0;
    const T: f64 = 48.0;
    const B: f64 = 56.0;
    let plot_w = W - L - R;
    let plot_h = H - T - B;
    let x_max = summary.last().map(|r| r.round).unwrap_or(1) as f64;
    let y_max = summary
        .iter()
        .flat_map(|r| [r.mean, r.p90])
        .fold(0.0f64, f64::max)
        .max(1e-12)
        * 1.05;
    let x_of = |round: usize| L + (round as f64 / x_max) * plot_w;
    let y_of = |v: f64| T + plot_h - (v / y_max).min(1.0) * plot_h;

    let stride = summary.len().div_ceil(1000);
    let thinned: Vec<&SummaryRow> = summary
        .iter()
        .step_by(stride)
        .chain(std::iter::once(summary.last().expect("nonempty")))
        .collect();

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"#ffffff\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"26\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        L + plot_w / 2.0,
        xml_escape(title)
    ));

    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let y = T + plot_h - frac * plot_h;
        let x = L + frac * plot_w;
        svg.push_str(&format!(
            "<line x1=\"{L:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#dddddd\"/>\n",
            L + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            L - 8.0,
            y + 4.0,
            fmt_tick(frac * y_max)
        ));
        let round_label = (frac * x_max).round() as usize;
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{round_label}</text>\n",
            T + plot_h + 20.0
        ));
    }

    let mut band = String::new();
    for row in &thinned {
        band.push_str(&format!("{:.2},{:.2} ", x_of(row.round), y_of(row.p10)));
    }
    for row in thinned.iter().rev() {
        band.push_str(&format!("{:.2},{:.2} ", x_of(row.round), y_of(row.p90)));
    }
    svg.push_str(&format!(
        "<polygon points=\"{}\" fill=\"#9db4e8\" fill-opacity=\"0.45\" stroke=\"none\"/>\n",
        band.trim_end()
    ));

    let mut line = String::new();
    for row in &thinned {
        line.push_str(&format!("{:.2},{:.2} ", x_of(row.round), y_of(row.mean)));
    }
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#2a4bd7\" stroke-width=\"1.8\"/>\n",
        line.trim_end()
    ));

    svg.push_str(&format!(
        "<line x1=\"{L:.2}\" y1=\"{T:.2}\" x2=\"{L:.2}\" y2=\"{:.2}\" stroke=\"#333333\"/>\n",
        T + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{L:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#333333\"/>\n",
        T + plot_h,
        L + plot_w,
        T + plot_h
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">round</text>\n",
        L + plot_w / 2.0,
        H - 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"20\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 20 {:.2})\">cumulative regret</text>\n",
        T + plot_h / 2.0,
        T + plot_h / 2.0
    ));
    svg.push_str("</svg>\n");

    let mut file = create_file(path)?;
    file.write_all(svg.as_bytes()).map_err(|e| Error::io(path, e))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eligibility::{build_dictionary, geometric_p_grid, simulate_leak_table};
    use std::fmt::Write as _;

    fn synthetic_config(kind: PolicyKind, arms: usize, rounds: usize, runs: usize) -> ExperimentConfig {
        ExperimentConfig {
            experiment: ExperimentSection {
                rounds,
                runs,
                base_seed: 11,
            },
            policy: PolicySection {
                kind,
                k: None,
                epsilon: None,
                alpha_ucb: None,
                alpha_risk: None,
                k0: None,
                update_period: None,
                dictionary: None,
                scores_in_context: None,
            },
            env: EnvSection {
                kind: EnvKind::Synthetic,
                arms: Some(arms),
                dim: Some(3),
                reward_family: Some(RewardFamily::Linear),
                eligibility: None,
                dataset: None,
            },
            output: None,
            sweep: None,
        }
    }

    fn temp_dictionary(dir: &Path, arms: usize) -> PathBuf {
        let grid = geometric_p_grid(arms, 1.12).unwrap();
        let table = simulate_leak_table(arms, &grid, 4000, 7).unwrap();
        let dict = build_dictionary(&table, &[0.1, 0.5, 1.0]).unwrap();
        let path = dir.join(format!("leak_m{arms}.dict"));
        dict.save(&path).unwrap();
        path
    }

    fn write_toy_dataset(dir: &Path) -> PathBuf {
        let path = dir.join("toy.csv");
        let mut text = String::new();
        for i in 0..60 {
            let class = i % 3;
            let center = class as f64 * 10.0;
            let wobble = (i / 3) as f64 * 0.01;
            writeln!(text, "{},{},{}", center + wobble, center - wobble, class).unwrap();
        }
        fs::write(&path, text).unwrap();
        path
    }

    fn classification_config(path: &Path, rounds: usize, runs: usize) -> ExperimentConfig {
        let mut config = synthetic_config(PolicyKind::KBoot, 0, rounds, runs);
        config.env = EnvSection {
            kind: EnvKind::Classification,
            arms: None,
            dim: None,
            reward_family: None,
            eligibility: None,
            dataset: Some(DatasetSection {
                path: path.to_path_buf(),
                delimiter: ',',
                has_header: false,
                label_col: 2,
                resample_if_short: true,
                zscore: false,
            }),
        };
        config
    }

    #[test]
    fn toml_roundtrip_with_defaults() {
        let text = r#"
            [experiment]
            rounds = 100
            runs = 3
            base_seed = 42

            [policy]
            kind = "kboot"

            [env]
            kind = "synthetic"
            arms = 5
            dim = 10
            reward_family = "linear"
        "#;
        let config = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(config.policy.kind, PolicyKind::KBoot);
        let kc = config.policy.kboot_config(9);
        assert_eq!(kc.k, 20);
        assert_eq!(kc.epsilon, 0.01);
        assert!(!config.scores_in_context());
        let echoed = config.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&echoed).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let text = r#"
            [experiment]
            rounds = 10
            runs = 1
            base_seed = 0

            [policy]
            kind = "kboot"
            epsilonn = 0.01

            [env]
            kind = "synthetic"
            arms = 2
            dim = 2
            reward_family = "linear"
        "#;
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("epsilonn"), "{err}");
    }

    #[test]
    fn misplaced_params_are_rejected_by_key() {
        let mut config = synthetic_config(PolicyKind::Uniform, 3, 10, 1);
        config.policy.k = Some(5);
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("policy.k"), "{err}");

        let mut config = synthetic_config(PolicyKind::KBoot, 3, 10, 1);
        config.policy.alpha_ucb = Some(1.0);
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("policy.alpha_ucb"), "{err}");
    }

    #[test]
    fn ec_requires_dictionary_and_alpha() {
        let mut config = synthetic_config(PolicyKind::KBootEc, 5, 10, 1);
        config.env.eligibility = Some(EligibilitySection {
            target_rho: None,
            sigma_e: Some(0.1),
        });
        config.policy.alpha_risk = Some(0.5);
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("policy.dictionary"), "{err}");

        config.policy.dictionary = Some(PathBuf::from("somewhere.dict"));
        config.policy.alpha_risk = None;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("policy.alpha_risk"), "{err}");
    }

    #[test]
    fn eligibility_needs_exactly_one_noise_spec() {
        let mut config = synthetic_config(PolicyKind::Top1, 4, 10, 1);
        config.env.eligibility = Some(EligibilitySection {
            target_rho: Some(0.5),
            sigma_e: Some(0.1),
        });
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("exactly one"), "{err}");

        config.env.eligibility = Some(EligibilitySection {
            target_rho: None,
            sigma_e: None,
        });
        assert!(config.validate().is_err());
    }

    #[test]
    fn score_policy_without_eligibility_is_rejected() {
        let config = synthetic_config(PolicyKind::Top1, 4, 10, 1);
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("env.eligibility"), "{err}");
    }

    #[test]
    fn classification_rejects_synthetic_fields_and_target_rho() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_toy_dataset(dir.path());
        let mut config = classification_config(&path, 20, 1);
        config.env.arms = Some(3);
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("env.arms"), "{err}");

        let mut config = classification_config(&path, 20, 1);
        config.policy.kind = PolicyKind::Top1;
        config.env.eligibility = Some(EligibilitySection {
            target_rho: Some(0.5),
            sigma_e: None,
        });
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("target_rho"), "{err}");
    }

    #[test]
    fn one_arm_uniform_has_zero_regret() {
        let mut config = synthetic_config(PolicyKind::Uniform, 1, 40, 2);
        config.env.dim = Some(2);
        let results = run_all(&config).unwrap();
        assert_eq!(results.len(), 2);
        for r in &results {
            assert_eq!(r.rounds.len(), 40);
            assert!(r.rounds.iter().all(|rec| rec.regret == 0.0));
            assert_eq!(r.cumulative_regret, 0.0);
        }
    }

    #[test]
    fn same_config_gives_identical_results() {
        let config = synthetic_config(PolicyKind::KBoot, 3, 30, 2);
        let first = run_all(&config).unwrap();
        let second = run_all(&config).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn high_target_rho_survives_an_unlucky_weight_draw() {
        let mut config = synthetic_config(PolicyKind::Top1, 5, 10, 1);
        config.experiment.base_seed = 0;
        config.env.dim = Some(10);
        config.env.eligibility = Some(EligibilitySection {
            target_rho: Some(0.75),
            sigma_e: None,
        });
        let first = run_all(&config).unwrap();
        let second = run_all(&config).unwrap();
        assert_eq!(first, second);
        assert_eq!(first[0].rounds.len(), 10);
    }

    #[test]
    fn run_one_matches_run_all_entry() {
        let config = synthetic_config(PolicyKind::LinUcb, 3, 25, 3);
        let experiment = Experiment::prepare(config).unwrap();
        let all = experiment.run_all().unwrap();
        let single = experiment.run_one(1).unwrap();
        assert_eq!(all[1], single);
        assert_eq!(all[0].seed, 11);
        assert_eq!(all[2].seed, 13);
    }

    #[test]
    fn regret_is_nonnegative_every_round() {
        let config = synthetic_config(PolicyKind::KBoot, 4, 60, 1);
        let results = run_all(&config).unwrap();
        assert!(results[0].rounds.iter().all(|r| r.regret >= 0.0));
        let curve = results[0].cumulative_curve();
        assert!(curve.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn pinned_ec_run_matches_bare_kboot_run() {
        let dir = tempfile::tempdir().unwrap();
        let dict_path = temp_dictionary(dir.path(), 5);

        let bare = synthetic_config(PolicyKind::KBoot, 5, 80, 1);
        let mut pinned = synthetic_config(PolicyKind::KBootEc, 5, 80, 1);
        pinned.policy.dictionary = Some(dict_path);
        pinned.policy.alpha_risk = Some(0.5);
        pinned.policy.k0 = Some(5);
        pinned.policy.update_period = Some(0);
        pinned.env.eligibility = Some(EligibilitySection {
            target_rho: None,
            sigma_e: Some(0.3),
        });

        let bare_runs = run_all(&bare).unwrap();
        let pinned_runs = run_all(&pinned).unwrap();
        for (b, p) in bare_runs[0].rounds.iter().zip(&pinned_runs[0].rounds) {
            assert_eq!(b.arm, p.arm);
            assert_eq!(b.reward, p.reward);
            assert_eq!(b.regret, p.regret);
            assert_eq!(b.k, None);
            assert_eq!(p.k, Some(5));
        }
        assert_eq!(pinned_runs[0].ec_refreshes.as_deref(), Some(&[][..]));
    }

    #[test]
    fn ec_run_logs_k_every_round_and_refreshes_on_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let dict_path = temp_dictionary(dir.path(), 5);
        let mut config = synthetic_config(PolicyKind::KBootEc, 5, 35, 1);
        config.policy.dictionary = Some(dict_path);
        config.policy.alpha_risk = Some(0.3);
        config.policy.update_period = Some(10);
        config.env.eligibility = Some(EligibilitySection {
            target_rho: None,
            sigma_e: Some(0.2),
        });
        let results = run_all(&config).unwrap();
        let run = &results[0];
        assert!(run.rounds.iter().all(|r| r.k.is_some()));
        let refreshes = run.ec_refreshes.as_ref().unwrap();
        assert_eq!(
            refreshes.iter().map(|r| r.round).collect::<Vec<_>>(),
            vec![10, 20, 30]
        );
    }

    #[test]
    fn linucb_scores_in_context_defaults_on() {
        let mut base = synthetic_config(PolicyKind::LinUcb, 3, 30, 1);
        base.env.eligibility = Some(EligibilitySection {
            target_rho: None,
            sigma_e: Some(0.2),
        });
        let mut explicit_on = base.clone();
        explicit_on.policy.scores_in_context = Some(true);
        let mut off = base.clone();
        off.policy.scores_in_context = Some(false);

        let default_runs = run_all(&base).unwrap();
        let on_runs = run_all(&explicit_on).unwrap();
        let off_runs = run_all(&off).unwrap();
        assert_eq!(default_runs, on_runs);
        assert_ne!(default_runs, off_runs);
    }

    #[test]
    fn top1_runs_against_simulated_scores() {
        let mut config = synthetic_config(PolicyKind::Top1, 4, 50, 2);
        config.env.eligibility = Some(EligibilitySection {
            target_rho: None,
            sigma_e: Some(0.0),
        });
        let results = run_all(&config).unwrap();
        assert_eq!(results.len(), 2);
        assert!(results[0].rounds.iter().all(|r| r.regret.is_finite()));
    }

    #[test]
    fn classification_accuracy_identity_holds() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_toy_dataset(dir.path());
        let config = classification_config(&path, 30, 2);
        let results = run_all(&config).unwrap();
        for run in &results {
            let n = run.rounds.len() as f64;
            let accuracy = run.accuracy.unwrap();
            assert_eq!(accuracy, 1.0 - run.cumulative_regret / n);
            let hit_rate = run.rounds.iter().map(|r| r.reward).sum::<f64>() / n;
            assert!((accuracy - hit_rate).abs() < 1e-12);
            assert!(run.rounds.iter().all(|r| r.k.is_none()));
        }
    }

    #[test]
    fn aggregate_single_run_collapses_to_the_curve() {
        let config = synthetic_config(PolicyKind::Uniform, 3, 20, 1);
        let results = run_all(&config).unwrap();
        let summary = aggregate(&results).unwrap();
        let curve = results[0].cumulative_curve();
        assert_eq!(summary.len(), 20);
        for (row, v) in summary.iter().zip(curve) {
            assert_eq!(row.mean, v);
            assert_eq!(row.p10, v);
            assert_eq!(row.p90, v);
        }
    }

    fn constant_regret_run(seed: u64, regret: f64, rounds: usize) -> RunResult {
        let records: Vec<RoundRecord> = (1..=rounds)
            .map(|round| RoundRecord {
                round,
                arm: 0,
                reward: 0.0,
                regret,
                k: None,
            })
            .collect();
        RunResult {
            seed,
            cumulative_regret: regret * rounds as f64,
            rounds: records,
            accuracy: None,
            ec_refreshes: None,
        }
    }

    #[test]
    fn aggregate_two_constant_curves() {
        let runs = vec![constant_regret_run(0, 0.0, 5), constant_regret_run(1, 10.0, 5)];
        let summary = aggregate(&runs).unwrap();
        let last = summary.last().unwrap();
        assert_eq!(last.round, 5);
        assert_eq!(last.mean, 25.0);
        assert_eq!(last.p10, 5.0);
        assert_eq!(last.p90, 45.0);
    }

    #[test]
    fn aggregate_percentiles_match_order_statistics() {
        let runs: Vec<RunResult> = (0..10)
            .map(|i| constant_regret_run(i, i as f64, 1))
            .collect();
        let summary = aggregate(&runs).unwrap();
        assert_eq!(summary[0].mean, 4.5);
        assert!((summary[0].p10 - 0.9).abs() < 1e-12);
        assert!((summary[0].p90 - 8.1).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_permutation_invariant_and_checks_lengths() {
        let config = synthetic_config(PolicyKind::KBoot, 3, 15, 3);
        let mut results = run_all(&config).unwrap();
        let forward = aggregate(&results).unwrap();
        results.reverse();
        let backward = aggregate(&results).unwrap();
        assert_eq!(forward, backward);

        results[0].rounds.pop();
        assert!(matches!(
            aggregate(&results),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn csv_has_header_plus_one_row_per_round() {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_config(PolicyKind::Uniform, 2, 12, 2);
        let results = run_all(&config).unwrap();
        let summary = aggregate(&results).unwrap();

        let plain = dir.path().join("plain.csv");
        write_summary_csv(&plain, &summary, None).unwrap();
        let text = fs::read_to_string(&plain).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 13);
        assert_eq!(lines[0], "round,mean,p10,p90");

        let wide = dir.path().join("wide.csv");
        write_summary_csv(&wide, &summary, Some(&results)).unwrap();
        let text = fs::read_to_string(&wide).unwrap();
        assert!(text.lines().next().unwrap().ends_with("run0,run1"));
        assert!(text.lines().all(|l| l.split(',').count() == 6));
    }

    #[test]
    fn json_report_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_config(PolicyKind::KBoot, 3, 10, 2);
        let results = run_all(&config).unwrap();
        let report = build_report(&config, results).unwrap();
        let path = dir.path().join("report.json");
        write_json_report(&path, &report).unwrap();
        let back = read_json_report(&path).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.metadata.regret_oracle, "noiseless_mean");
        assert_eq!(back.seeds, vec![11, 12]);
    }

    #[test]
    fn svg_chart_is_written_with_band_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_config(PolicyKind::Uniform, 2, 15, 2);
        let results = run_all(&config).unwrap();
        let summary = aggregate(&results).unwrap();
        let path = dir.path().join("chart.svg");
        write_svg_chart(&path, &summary, "uniform baseline").unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("<polygon"));
        assert!(text.contains("<polyline"));
        assert!(text.contains("uniform baseline"));
    }

    #[test]
    fn sweep_expands_to_the_full_grid() {
        let mut config = synthetic_config(PolicyKind::KBootEc, 5, 10, 1);
        let dir = tempfile::tempdir().unwrap();
        let dict_path = temp_dictionary(dir.path(), 5);
        config.policy.dictionary = Some(dict_path);
        config.sweep = Some(SweepSection {
            target_rho: vec![0.2, 0.5],
            alpha_risk: vec![0.1, 0.3],
        });
        config.validate().unwrap();
        let cells = config.expand_sweep().unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0].1, "rho0.2_alpha0.1");
        assert_eq!(cells[3].1, "rho0.5_alpha0.3");
        for (cell, _) in &cells {
            assert!(cell.sweep.is_none());
            assert!(cell.env.eligibility.as_ref().unwrap().target_rho.is_some());
            assert!(cell.policy.alpha_risk.is_some());
        }
        let err = Experiment::prepare(config).unwrap_err();
        assert!(err.to_string().contains("sweep"), "{err}");
    }

    #[test]
    fn sweep_knob_ownership_is_validated() {
        let mut config = synthetic_config(PolicyKind::KBoot, 3, 10, 1);
        config.sweep = Some(SweepSection {
            target_rho: vec![0.3],
            alpha_risk: vec![],
        });
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("sweep.target_rho"), "{err}");

        let mut config = synthetic_config(PolicyKind::KBoot, 3, 10, 1);
        config.sweep = Some(SweepSection {
            target_rho: vec![],
            alpha_risk: vec![0.1],
        });
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("sweep.alpha_risk"), "{err}");
    }

    #[test]
    fn short_dataset_without_resampling_fails_at_prepare() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_toy_dataset(dir.path());
        let mut config = classification_config(&path, 40, 2);
        config.env.dataset.as_mut().unwrap().resample_if_short = false;
        let err = run_all(&config).unwrap_err();
        assert!(matches!(err, Error::InsufficientRows { .. }));
    }
}
