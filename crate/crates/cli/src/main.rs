//! Benchmark and tooling CLI for the bandit library: dictionary
//! generation, experiment execution, preset benchmark suites, dataset
//! conversion, and config validation.
//!
//! Exit codes: 0 on success, 2 for configuration problems (bad flags,
//! invalid configs, unsatisfiable grids, missing input files), 3 for
//! failures during execution.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use kboot::eligibility::{build_dictionary, geometric_p_grid, simulate_leak_table};
use kboot::envs::{load_dataset, DatasetSchema, RewardFamily};
use kboot::harness::{
    build_report, write_json_report, write_summary_csv, write_svg_chart, DatasetSection, EnvKind,
    EnvSection, Experiment, ExperimentConfig, ExperimentSection, OutputFormat, PolicyKind,
    PolicySection, RunResult, SummaryRow,
};

#[derive(Parser)]
#[command(name = "kboot", version, about = "Nonparametric bandit benchmark toolkit")]
struct Cli {
    /// Bound the number of worker threads used for parallel runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the rank-leak table and write a threshold dictionary.
    GenDict(GenDictArgs),
    /// Execute the experiment described by a TOML config.
    Run(RunArgs),
    /// Run a preset benchmark suite over the standard hyperparameter grid.
    Bench(BenchArgs),
    /// Normalize a delimited classification dataset to the canonical form.
    ConvertDataset(ConvertDatasetArgs),
    /// Check experiment configs without running them.
    ValidateConfig(ValidateConfigArgs),
}

#[derive(clap::Args)]
struct GenDictArgs {
    /// Number of arms the dictionary is built for.
    #[arg(long)]
    arms: usize,
    /// Comma-separated risk levels to precompute thresholds for.
    #[arg(long, value_delimiter = ',', required = true)]
    alpha_grid: Vec<f64>,
    /// Monte-Carlo replicates per perturbation level.
    #[arg(long, default_value_t = 100_000)]
    replications: usize,
    /// Simulation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the dictionary file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Synthetic,
    Uci,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Which preset suite to run.
    #[arg(long, value_enum)]
    suite: Suite,
    /// Directory to write per-cell results and the selection report into.
    #[arg(long)]
    out: PathBuf,
    /// Rounds per run (defaults: 2000 synthetic, 5000 uci).
    #[arg(long)]
    rounds: Option<usize>,
    /// Runs per cell (defaults: 10 synthetic, 5 uci).
    #[arg(long)]
    runs: Option<usize>,
    /// Directory holding the converted UCI datasets.
    #[arg(long, default_value = "datasets")]
    datasets_dir: PathBuf,
}

#[derive(clap::Args)]
struct ConvertDatasetArgs {
    /// Input delimited file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output path for the canonical CSV (sidecar written next to it).
    #[arg(long)]
    out: PathBuf,
    /// Input cell separator.
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    /// Zero-based index of the class-label column in the input.
    #[arg(long)]
    label_col: usize,
    /// Skip the input's first line.
    #[arg(long)]
    has_header: bool,
}

#[derive(clap::Args)]
struct ValidateConfigArgs {
    /// Config files to check.
    #[arg(required = true)]
    configs: Vec<PathBuf>,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    source: anyhow::Error,
}

impl CliError {
    fn config(e: impl Into<anyhow::Error>) -> Self {
        CliError {
            code: 2,
            source: e.into(),
        }
    }

    fn runtime(e: impl Into<anyhow::Error>) -> Self {
        CliError {
            code: 3,
            source: e.into(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: failed to size the worker pool: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::GenDict(args) => cmd_gen_dict(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::ConvertDataset(args) => cmd_convert_dataset(&args),
        Command::ValidateConfig(args) => cmd_validate_config(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            ExitCode::from(e.code)
        }
    }
}

fn cmd_gen_dict(args: &GenDictArgs) -> CliResult {
    let grid = geometric_p_grid(args.arms, 1.12).map_err(CliError::config)?;
    let table = simulate_leak_table(args.arms, &grid, args.replications, args.seed)
        .map_err(CliError::config)?;
    let dict = build_dictionary(&table, &args.alpha_grid).map_err(CliError::config)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))
                .map_err(CliError::runtime)?;
        }
    }
    dict.save(&args.out).map_err(CliError::runtime)?;

    let mut worst_gap = 0.0f64;
    for bucket in 0..dict.buckets() {
        let center = dict.bucket_center(bucket);
        let nearest = table
            .rows
            .iter()
            .map(|row| (row.mean_rho - center).abs())
            .fold(f64::INFINITY, f64::min);
        worst_gap = worst_gap.max(nearest);
    }
    println!(
        "wrote {}: {} arms, {} perturbation levels, {} correlation buckets, {} alpha levels",
        args.out.display(),
        dict.seq_len(),
        table.rows.len(),
        dict.buckets(),
        dict.alphas().len()
    );
    println!("coverage: worst bucket-center distance {worst_gap:.4} (limit 0.05)");
    Ok(())
}

fn output_formats(config: &ExperimentConfig) -> Vec<OutputFormat> {
    config
        .output
        .as_ref()
        .map(|o| o.formats())
        .unwrap_or_else(|| vec![OutputFormat::Csv, OutputFormat::Json])
}

fn output_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .output
        .as_ref()
        .and_then(|o| o.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn output_stem(config: &ExperimentConfig) -> String {
    config
        .output
        .as_ref()
        .map(|o| o.stem().to_string())
        .unwrap_or_else(|| "results".to_string())
}

struct CellOutcome {
    stem: String,
    files: Vec<PathBuf>,
    final_row: SummaryRow,
}

fn execute_cell(
    config: &ExperimentConfig,
    dir: &Path,
    stem: &str,
    formats: &[OutputFormat],
    per_run_columns: bool,
) -> CliResult<(CellOutcome, Vec<RunResult>)> {
    let experiment = Experiment::prepare(config.clone()).map_err(CliError::config)?;
    let results = experiment.run_all().map_err(CliError::runtime)?;
    let report = build_report(experiment.config(), results).map_err(CliError::runtime)?;
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::runtime)?;
    let mut files = Vec::new();
    for format in formats {
        match format {
            OutputFormat::Csv => {
                let path = dir.join(format!("{stem}.csv"));
                let per_run = per_run_columns.then_some(report.runs.as_slice());
                write_summary_csv(&path, &report.summary, per_run).map_err(CliError::runtime)?;
                files.push(path);
            }
            OutputFormat::Json => {
                let path = dir.join(format!("{stem}.json"));
                write_json_report(&path, &report).map_err(CliError::runtime)?;
                files.push(path);
            }
            OutputFormat::Svg => {
                let path = dir.join(format!("{stem}.svg"));
                write_svg_chart(&path, &report.summary, stem).map_err(CliError::runtime)?;
                files.push(path);
            }
        }
    }
    let final_row = *report.summary.last().expect("at least one round");
    let outcome = CellOutcome {
        stem: stem.to_string(),
        files,
        final_row,
    };
    Ok((outcome, report.runs))
}

fn cmd_run(args: &RunArgs) -> CliResult {
    let mut config = ExperimentConfig::load(&args.config).map_err(CliError::config)?;
    if let Some(seed) = args.seed {
        config.experiment.base_seed = seed;
    }
    if let Some(out) = &args.out {
        match &mut config.output {
            Some(section) => section.dir = Some(out.clone()),
            None => {
                config.output = Some(kboot::harness::OutputSection {
                    dir: Some(out.clone()),
                    formats: Vec::new(),
                    per_run_columns: false,
                    stem: None,
                });
            }
        }
    }
    let dir = output_dir(&config);
    let stem = output_stem(&config);
    let formats = output_formats(&config);
    let per_run_columns = config.output.as_ref().is_some_and(|o| o.per_run_columns);
    let cells = config.expand_sweep().map_err(CliError::config)?;
    for (cell, label) in cells {
        let cell_stem = if label.is_empty() {
            stem.clone()
        } else {
            format!("{stem}_{label}")
        };
        let (outcome, _) = execute_cell(&cell, &dir, &cell_stem, &formats, per_run_columns)?;
        let files = outcome
            .files
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ");
        println!(
            "{}: policy={} rounds={} runs={} final regret mean={:.4} p10={:.4} p90={:.4} -> {}",
            outcome.stem,
            policy_name(cell.policy.kind),
            cell.experiment.rounds,
            cell.experiment.runs,
            outcome.final_row.mean,
            outcome.final_row.p10,
            outcome.final_row.p90,
            files
        );
    }
    Ok(())
}

fn policy_name(kind: PolicyKind) -> &'static str {
    match kind {
        PolicyKind::KBoot => "kboot",
        PolicyKind::KBootEc => "kboot+ec",
        PolicyKind::LinUcb => "linucb",
        PolicyKind::LinUcbEc => "linucb+ec",
        PolicyKind::Top1 => "top1",
        PolicyKind::Uniform => "uniform",
    }
}

fn bare_policy(kind: PolicyKind) -> PolicySection {
    PolicySection {
        kind,
        k: None,
        epsilon: None,
        alpha_ucb: None,
        alpha_risk: None,
        k0: None,
        update_period: None,
        dictionary: None,
        scores_in_context: None,
    }
}

struct BenchCell {
    stem: String,
    family: &'static str,
    param: String,
    config: ExperimentConfig,
}

fn policy_grid() -> Vec<(PolicySection, &'static str, String)> {
    let mut grid = Vec::new();
    for k in [20usize, 50, 100] {
        let mut policy = bare_policy(PolicyKind::KBoot);
        policy.k = Some(k);
        grid.push((policy, "kboot", format!("k={k}")));
    }
    for alpha in [0.1f64, 1.0, 10.0] {
        let mut policy = bare_policy(PolicyKind::LinUcb);
        policy.alpha_ucb = Some(alpha);
        grid.push((policy, "linucb", format!("alpha_ucb={alpha}")));
    }
    grid
}

fn synthetic_bench_cells(rounds: usize, runs: usize) -> Vec<BenchCell> {
    policy_grid()
        .into_iter()
        .map(|(policy, family, param)| {
            let stem = format!(
                "synthetic_{family}_{}",
                param.replace('=', "").replace("alpha_ucb", "a")
            );
            BenchCell {
                stem,
                family,
                param,
                config: ExperimentConfig {
                    experiment: ExperimentSection {
                        rounds,
                        runs,
                        base_seed: 9000,
                    },
                    policy,
                    env: EnvSection {
                        kind: EnvKind::Synthetic,
                        arms: Some(5),
                        dim: Some(10),
                        reward_family: Some(RewardFamily::Linear),
                        eligibility: None,
                        dataset: None,
                    },
                    output: None,
                    sweep: None,
                },
            }
        })
        .collect()
}

const UCI_DATASETS: [&str; 4] = ["shuttle", "covertype", "magic", "pendigits"];

fn column_count(path: &Path) -> CliResult<usize> {
    let file = fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(CliError::config)?;
    let mut line = String::new();
    BufReader::new(file)
        .read_line(&mut line)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::config)?;
    let trimmed = line.trim_end();
    if trimmed.is_empty() {
        return Err(CliError::config(anyhow!("{} is empty", path.display())));
    }
    Ok(trimmed.split(',').count())
}

fn uci_bench_cells(datasets_dir: &Path, rounds: usize, runs: usize) -> CliResult<Vec<BenchCell>> {
    let expected: Vec<PathBuf> = UCI_DATASETS
        .iter()
        .map(|name| datasets_dir.join(format!("{name}.csv")))
        .collect();
    let missing: Vec<&PathBuf> = expected.iter().filter(|p| !p.exists()).collect();
    if !missing.is_empty() {
        let mut msg = String::from(
            "missing datasets for the uci suite; convert them with \
             `kboot convert-dataset` and place them at:",
        );
        for path in missing {
            write!(msg, "\n  {}", path.display()).expect("string write");
        }
        return Err(CliError::config(anyhow!(msg)));
    }
    let mut cells = Vec::new();
    for (name, path) in UCI_DATASETS.iter().zip(&expected) {
        let label_col = column_count(path)? - 1;
        for (policy, family, param) in policy_grid() {
            let stem = format!(
                "{name}_{family}_{}",
                param.replace('=', "").replace("alpha_ucb", "a")
            );
            cells.push(BenchCell {
                stem,
                family,
                param,
                config: ExperimentConfig {
                    experiment: ExperimentSection {
                        rounds,
                        runs,
                        base_seed: 9000,
                    },
                    policy,
                    env: EnvSection {
                        kind: EnvKind::Classification,
                        arms: None,
                        dim: None,
                        reward_family: None,
                        eligibility: None,
                        dataset: Some(DatasetSection {
                            path: path.clone(),
                            delimiter: ',',
                            has_header: false,
                            label_col,
                            resample_if_short: true,
                            zscore: true,
                        }),
                    },
                    output: None,
                    sweep: None,
                },
            });
        }
    }
    Ok(cells)
}

fn cmd_bench(args: &BenchArgs) -> CliResult {
    let (cells, suite_name) = match args.suite {
        Suite::Synthetic => {
            let rounds = args.rounds.unwrap_or(2000);
            let runs = args.runs.unwrap_or(10);
            (synthetic_bench_cells(rounds, runs), "synthetic")
        }
        Suite::Uci => {
            let rounds = args.rounds.unwrap_or(5000);
            let runs = args.runs.unwrap_or(5);
            (uci_bench_cells(&args.datasets_dir, rounds, runs)?, "uci")
        }
    };
    let formats = [OutputFormat::Csv, OutputFormat::Json, OutputFormat::Svg];
    let mut lines = vec![format!("suite: {suite_name}"), format!("cells: {}", cells.len())];
    let mut scored: Vec<(String, &'static str, String, f64)> = Vec::new();
    for cell in &cells {
        let (outcome, runs) = execute_cell(&cell.config, &args.out, &cell.stem, &formats, false)?;
        let mean_final = outcome.final_row.mean;
        let mut line = format!("{}: mean final cumulative regret {:.4}", cell.stem, mean_final);
        if let Some(acc) = mean_accuracy(&runs) {
            write!(line, ", mean accuracy {acc:.4}").expect("string write");
        }
        lines.push(line);
        scored.push((cell.stem.clone(), cell.family, cell.param.clone(), mean_final));
    }
    let mut prefixes: Vec<String> = scored
        .iter()
        .map(|(stem, family, _, _)| {
            let suffix = stem.rfind(family).unwrap_or(0);
            stem[..suffix].to_string()
        })
        .collect();
    prefixes.dedup();
    for prefix in prefixes {
        for family in ["kboot", "linucb"] {
            let best = scored
                .iter()
                .filter(|(stem, f, _, _)| *f == family && stem.starts_with(&prefix))
                .min_by(|a, b| a.3.partial_cmp(&b.3).expect("finite regret"));
            if let Some((_, _, param, score)) = best {
                let scope = if prefix.is_empty() {
                    family.to_string()
                } else {
                    format!("{}{family}", prefix)
                };
                lines.push(format!(
                    "selected {scope}: {param} (lowest mean cumulative regret {score:.4})"
                ));
            }
        }
    }
    let report_text = lines.join("\n") + "\n";
    let report_path = args.out.join("report.txt");
    fs::write(&report_path, &report_text)
        .with_context(|| format!("writing {}", report_path.display()))
        .map_err(CliError::runtime)?;
    print!("{report_text}");
    Ok(())
}

fn mean_accuracy(runs: &[RunResult]) -> Option<f64> {
    let accs: Vec<f64> = runs.iter().filter_map(|r| r.accuracy).collect();
    if accs.len() == runs.len() && !accs.is_empty() {
        Some(accs.iter().sum::<f64>() / accs.len() as f64)
    } else {
        None
    }
}

fn cmd_convert_dataset(args: &ConvertDatasetArgs) -> CliResult {
    let schema = DatasetSchema {
        delimiter: args.delimiter,
        has_header: args.has_header,
        label_col: args.label_col,
    };
    let ds = load_dataset::<f64>(&args.input, &schema).map_err(CliError::config)?;
    let mut out = String::new();
    for (features, label) in ds.features.iter().zip(&ds.labels) {
        for value in features {
            write!(out, "{value},").expect("string write");
        }
        writeln!(out, "{label}").expect("string write");
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))
                .map_err(CliError::runtime)?;
        }
    }
    fs::write(&args.out, out)
        .with_context(|| format!("writing {}", args.out.display()))
        .map_err(CliError::runtime)?;
    let sidecar_path = args.out.with_extension("meta.json");
    let sidecar = serde_json::json!({
        "n_classes": ds.n_classes,
        "d": ds.dim(),
        "rows": ds.len(),
    });
    let mut sidecar_text =
        serde_json::to_string_pretty(&sidecar).expect("serializing sidecar metadata");
    sidecar_text.push('\n');
    fs::write(&sidecar_path, sidecar_text)
        .with_context(|| format!("writing {}", sidecar_path.display()))
        .map_err(CliError::runtime)?;
    println!(
        "wrote {} rows (d={}, {} classes) -> {}, sidecar {}",
        ds.len(),
        ds.dim(),
        ds.n_classes,
        args.out.display(),
        sidecar_path.display()
    );
    Ok(())
}

fn cmd_validate_config(args: &ValidateConfigArgs) -> CliResult {
    let mut failures = 0usize;
    for path in &args.configs {
        match check_config(path) {
            Ok(()) => println!("ok: {}", path.display()),
            Err(e) => {
                failures += 1;
                println!("invalid: {}: {e:#}", path.display());
            }
        }
    }
    if failures > 0 {
        Err(CliError::config(anyhow!(
            "{failures} of {} configs failed validation",
            args.configs.len()
        )))
    } else {
        Ok(())
    }
}

fn check_config(path: &Path) -> anyhow::Result<()> {
    let config = ExperimentConfig::load(path)?;
    for (cell, _) in config.expand_sweep()? {
        Experiment::prepare(cell)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_cells_cover_the_preset_grid() {
        let cells = synthetic_bench_cells(100, 2);
        assert_eq!(cells.len(), 6);
        let stems: Vec<&str> = cells.iter().map(|c| c.stem.as_str()).collect();
        assert_eq!(
            stems,
            vec![
                "synthetic_kboot_k20",
                "synthetic_kboot_k50",
                "synthetic_kboot_k100",
                "synthetic_linucb_a0.1",
                "synthetic_linucb_a1",
                "synthetic_linucb_a10",
            ]
        );
        for cell in &cells {
            cell.config.validate().unwrap();
        }
    }

    #[test]
    fn uci_cells_require_all_datasets() {
        let dir = tempfile::tempdir().unwrap();
        let err = uci_bench_cells(dir.path(), 100, 2).err().unwrap();
        assert_eq!(err.code, 2);
        let msg = format!("{:#}", err.source);
        for name in UCI_DATASETS {
            assert!(msg.contains(&format!("{name}.csv")), "{msg}");
        }
    }

    #[test]
    fn column_count_reads_the_first_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        fs::write(&path, "1,2,3,0\n4,5,6,1\n").unwrap();
        assert_eq!(column_count(&path).unwrap(), 4);
    }
}
