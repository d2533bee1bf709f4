mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use chrono::NaiveDate;
use chrono_tz::Tz;
use clap::{CommandFactory, Parser, Subcommand};
use loadpatch_core::backend::{complete_all, open_backend, StubRegistry, DEFAULT_MAX_IN_FLIGHT};
use loadpatch_core::costing::{cost_curve, estimate_tokens, estimate_cost, CostModel};
use loadpatch_core::ingestion::{
    align_and_segment, ingest_load_csv, ingest_temperature_csv, read_dataset as read_profiles,
    summarize, write_dataset as write_profiles,
};
use loadpatch_core::metrics::{aggregate, format_pct};
use loadpatch_core::orchestrator::{Manifest, RowStatus, Runner};
use loadpatch_core::preprocess::{prepare, DEFAULT_ABNORMAL_THRESHOLD};
use loadpatch_core::promptset::{build_dataset, read_dataset, write_dataset, DatasetRequest};
use loadpatch_core::restorer::{read_results, restore_and_score, write_results, ResultsMeta, SampleOutcome};
use loadpatch_core::synth::{generate, write_fleet, FleetSpec};
use loadpatch_core::{report, PreparedDataset, PromptVariant};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "loadpatch",
    version,
    about = "Restore missing windows in daily load profiles with fine-tuned chat models"
)]
struct Cli {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic fleet as CSV files
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 11)]
        users: usize,
        #[arg(long, default_value_t = 86)]
        days: usize,
        #[arg(long, default_value = "2018-06-01")]
        start: NaiveDate,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Read meter and temperature CSVs into daily profiles
    Ingest {
        /// Glob of load CSVs, one file per user (user id = file stem)
        #[arg(long)]
        load: String,
        #[arg(long)]
        temperature: PathBuf,
        /// IANA zone that defines local days, e.g. America/Los_Angeles
        #[arg(long, default_value = "UTC")]
        tz: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize, flag abnormal days and place one seeded mask per day
    Prepare {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_ABNORMAL_THRESHOLD)]
        abnormal_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render training samples and test prompts
    BuildDataset {
        #[arg(long)]
        prepared: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Take variant, sample count and filtering from a preset
        #[arg(long, conflicts_with_all = ["flags", "n_train", "remove_abnormal"])]
        preset: Option<String>,
        /// Comma list of advanced, separate, discard (or none)
        #[arg(long)]
        flags: Option<String>,
        /// Comma list of user ids (default: all users)
        #[arg(long, value_delimiter = ',')]
        users: Vec<String>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        remove_abnormal: bool,
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
    /// Run scenarios end to end (build, fine-tune, restore, evaluate)
    Run {
        #[arg(long)]
        prepared: Option<PathBuf>,
        /// Preset name, comma list, or `all`
        #[arg(long)]
        preset: Vec<String>,
        /// echo, interp or remote
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        base_model: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_in_flight: Option<usize>,
    },
    /// Stage-2 sweep on target users, with the stage-1 and direct baselines
    Stage2 {
        #[arg(long)]
        prepared: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        target: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        stage1_users: Vec<String>,
        #[arg(long)]
        preset: Vec<String>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        base_model: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_direct: bool,
        #[arg(long)]
        max_in_flight: Option<usize>,
    },
    /// Restore test prompts from stored completions or a model
    Restore {
        #[arg(long)]
        prepared: Option<PathBuf>,
        #[arg(long)]
        prompts: PathBuf,
        /// JSONL of completion strings, one per prompt
        #[arg(long, conflicts_with = "model")]
        completions: Option<PathBuf>,
        /// Model id to query through --backend
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long, default_value = "restore")]
        label: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize results files
    Evaluate {
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
    /// Training tokens and cost for a fine-tuning file
    Cost {
        #[arg(long)]
        dataset: PathBuf,
        /// Sample counts for a cost curve, e.g. 128,256,512
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long)]
        price: Option<f64>,
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// Tables from an experiment manifest
    Report {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn usage_error(msg: &str) -> ! {
    Cli::command()
        .error(clap::error::ErrorKind::MissingRequiredArgument, msg)
        .exit()
}

fn require_seed(flag: Option<u64>, cfg: &RunConfig) -> u64 {
    flag.or(cfg.seed)
        .unwrap_or_else(|| usage_error("a seed is required: pass --seed or set `seed` in the config"))
}

fn require_path(flag: Option<PathBuf>, cfg: Option<&PathBuf>, what: &str) -> PathBuf {
    flag.or_else(|| cfg.cloned())
        .unwrap_or_else(|| usage_error(&format!("{what} is required")))
}

fn load_prepared(path: &Path) -> anyhow::Result<PreparedDataset> {
    PreparedDataset::read(path).with_context(|| format!("reading prepared dataset {}", path.display()))
}

fn cmd_ingest(load: &str, temperature: &Path, tz: &str, out: &Path) -> anyhow::Result<()> {
    let tz: Tz = tz.parse().map_err(|e| anyhow::anyhow!("timezone {tz:?}: {e}"))?;
    let temp = ingest_temperature_csv(temperature, tz)?;
    let mut files: Vec<PathBuf> = glob::glob(load)?.collect::<Result<_, _>>()?;
    files.sort();
    if files.is_empty() {
        bail!("no load files match {load:?}");
    }
    let mut days = Vec::new();
    for f in &files {
        let user = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .context("load file without a name")?;
        let series = ingest_load_csv(f, &user, tz)?;
        match align_and_segment(&series, &temp, tz) {
            Ok(d) => days.extend(d),
            Err(e) => log::warn!("{user}: {e}"),
        }
    }
    let stats = summarize(&days)?;
    write_profiles(out, tz, &days)?;
    println!(
        "{} days from {} users; load {:.2}..{:.2} kW; temperature {:.2}..{:.2}",
        stats.n_days, stats.n_users, stats.load_min, stats.load_max, stats.temp_min, stats.temp_max
    );
    Ok(())
}

fn cmd_prepare(dataset: &Path, seed: u64, threshold: f64, out: &Path) -> anyhow::Result<()> {
    let (_, days) = read_profiles(dataset)?;
    let prepared = prepare(&days, seed, threshold)?;
    prepared.write(out)?;
    let abnormal = prepared.days.iter().filter(|d| d.abnormal).count();
    println!(
        "{} days prepared ({} abnormal); load range {:.2}..{:.2} kW",
        prepared.days.len(),
        abnormal,
        prepared.meta.params.load_min,
        prepared.meta.params.load_max
    );
    Ok(())
}

fn print_outcomes(label: &str, outcomes: &[SampleOutcome]) -> anyhow::Result<()> {
    let scored: Vec<_> = outcomes.iter().filter_map(|o| o.metrics().copied()).collect();
    let failed = outcomes.len() - scored.len();
    match aggregate(&scored, label, failed) {
        Ok(r) => println!(
            "{label}: MPE {}%  RMSE {}%  EGYE {}%  ({} scored, {} failed)",
            format_pct(r.means.mpe),
            format_pct(r.means.rmse_norm),
            format_pct(r.means.egye),
            r.samples.len(),
            failed
        ),
        Err(e) => println!("{label}: {e} ({failed} failed)"),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth {
            out,
            users,
            days,
            start,
            seed,
        } => {
            let fleet = generate(&FleetSpec {
                n_users: users,
                n_days: days,
                start,
                seed,
            });
            write_fleet(&fleet, &out)?;
            println!("wrote {users} load files and one temperature file to {}", out.display());
        }
        Command::Ingest {
            load,
            temperature,
            tz,
            out,
        } => cmd_ingest(&load, &temperature, &tz, &out)?,
        Command::Prepare {
            dataset,
            seed,
            abnormal_threshold,
            out,
        } => cmd_prepare(&dataset, require_seed(seed, &cfg), abnormal_threshold, &out)?,
        Command::BuildDataset {
            prepared,
            seed,
            preset,
            flags,
            users,
            n_train,
            remove_abnormal,
            train_frac,
            train_out,
            test_out,
        } => {
            let seed = require_seed(seed, &cfg);
            let p = load_prepared(&require_path(prepared, cfg.prepared.as_ref(), "--prepared"))?;
            let (variant, n_train, remove_abnormal) = match preset {
                Some(name) => {
                    let s = loadpatch_core::orchestrator::preset(&name)?;
                    (s.variant(), Some(s.n_samples), s.remove_abnormal_days)
                }
                None => (
                    flags
                        .as_deref()
                        .map(PromptVariant::parse_flags)
                        .transpose()?
                        .unwrap_or_default(),
                    n_train,
                    remove_abnormal,
                ),
            };
            let built = build_dataset(
                &p,
                &DatasetRequest {
                    variant,
                    users: (!users.is_empty()).then_some(users.as_slice()),
                    n_train,
                    train_frac,
                    remove_abnormal,
                    seed,
                },
            )?;
            write_dataset(&built.train, &train_out)?;
            write_dataset(&built.test, &test_out)?;
            println!("{} training samples, {} test prompts", built.train.len(), built.test.len());
        }
        Command::Run {
            prepared,
            preset,
            backend,
            base_model,
            seed,
            out,
            max_in_flight,
        } => {
            let seed = require_seed(seed, &cfg);
            let scenarios = cfg.scenarios(&preset)?;
            let handle = cfg.backend_handle(backend.as_deref(), base_model.as_deref())?;
            let p = load_prepared(&require_path(prepared, cfg.prepared.as_ref(), "--prepared"))?;
            let out = require_path(out, cfg.output_dir.as_ref(), "--out");
            let backend = open_backend(&handle, Arc::new(StubRegistry::from_prepared(&p)))?;
            let mut runner = Runner::new(&p, backend.as_ref(), &out, seed)?;
            runner.cost = cfg.cost;
            runner.hyperparams = cfg.hyperparams.clone();
            runner.max_in_flight = max_in_flight.or(cfg.max_in_flight).unwrap_or(DEFAULT_MAX_IN_FLIGHT);
            let rows = runner.run_matrix(&cfg.plan, &scenarios)?;
            print!("{}", report::render(&rows));
            let failed = rows.iter().filter(|r| r.status == RowStatus::Failed).count();
            if failed > 0 {
                bail!("{failed} of {} scenarios failed", rows.len());
            }
        }
        Command::Stage2 {
            prepared,
            target,
            counts,
            stage1_users,
            preset,
            backend,
            base_model,
            seed,
            out,
            no_direct,
            max_in_flight,
        } => {
            let seed = require_seed(seed, &cfg);
            let mut plan = cfg.plan.clone();
            if !target.is_empty() {
                plan.stage2_targets = target;
            }
            if let Some(c) = counts {
                plan.stage2_sample_counts = c;
            }
            if !stage1_users.is_empty() {
                plan.stage1_users = stage1_users;
            }
            if no_direct {
                plan.direct_control = false;
            }
            plan.validate()?;
            let scenario = if preset.is_empty() && cfg.preset.is_none() && cfg.scenario.is_none() {
                loadpatch_core::orchestrator::preset("scenario7")?
            } else {
                let mut s = cfg.scenarios(&preset)?;
                if s.len() != 1 {
                    bail!("stage2 takes exactly one scenario, got {}", s.len());
                }
                s.remove(0)
            };
            let handle = cfg.backend_handle(backend.as_deref(), base_model.as_deref())?;
            let p = load_prepared(&require_path(prepared, cfg.prepared.as_ref(), "--prepared"))?;
            let out = require_path(out, cfg.output_dir.as_ref(), "--out");
            let backend = open_backend(&handle, Arc::new(StubRegistry::from_prepared(&p)))?;
            let mut runner = Runner::new(&p, backend.as_ref(), &out, seed)?;
            runner.cost = cfg.cost;
            runner.hyperparams = cfg.hyperparams.clone();
            runner.max_in_flight = max_in_flight.or(cfg.max_in_flight).unwrap_or(DEFAULT_MAX_IN_FLIGHT);
            let rows = runner.run_stage2_experiment(&plan, &scenario)?;
            print!("{}", report::render(&rows));
            let failed = rows.iter().filter(|r| r.status == RowStatus::Failed).count();
            if failed > 0 {
                bail!("{failed} of {} runs failed", rows.len());
            }
        }
        Command::Restore {
            prepared,
            prompts,
            completions,
            model,
            backend,
            label,
            out,
        } => {
            let p = load_prepared(&require_path(prepared, cfg.prepared.as_ref(), "--prepared"))?;
            let prompts = read_dataset(&prompts)?;
            let (model_id, texts): (String, Vec<anyhow::Result<String>>) = match (completions, model) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    let lines: Vec<anyhow::Result<String>> = text
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .enumerate()
                        .map(|(i, l)| {
                            serde_json::from_str::<String>(l)
                                .with_context(|| format!("{}: line {}", path.display(), i + 1))
                        })
                        .collect();
                    (path.display().to_string(), lines)
                }
                (None, Some(model)) => {
                    let handle = cfg.backend_handle(backend.as_deref(), None)?;
                    let backend = open_backend(&handle, Arc::new(StubRegistry::from_prepared(&p)))?;
                    let n = cfg.max_in_flight.unwrap_or(DEFAULT_MAX_IN_FLIGHT);
                    let out = complete_all(backend.as_ref(), &model, &prompts, n)?
                        .into_iter()
                        .map(|r| r.map_err(anyhow::Error::from))
                        .collect();
                    (model, out)
                }
                (None, None) => usage_error("pass --completions or --model"),
            };
            if texts.len() != prompts.len() {
                bail!("{} completions for {} prompts", texts.len(), prompts.len());
            }
            let days: std::collections::HashMap<_, _> =
                p.days.iter().map(|d| (d.day_ref(), d)).collect();
            let mut outcomes = Vec::new();
            for (prompt, text) in prompts.iter().zip(texts) {
                let day = days
                    .get(&prompt.day_ref)
                    .with_context(|| format!("{} is not in the prepared dataset", prompt.day_ref))?;
                outcomes.push(match text {
                    Ok(t) => restore_and_score(&t, day, prompt.variant, p.params()),
                    Err(e) => SampleOutcome::Failed {
                        day_ref: prompt.day_ref.clone(),
                        error: e.to_string(),
                    },
                });
            }
            write_results(
                &out,
                &ResultsMeta {
                    label: label.clone(),
                    model_id,
                    params: *p.params(),
                },
                &outcomes,
            )?;
            print_outcomes(&label, &outcomes)?;
        }
        Command::Evaluate { results } => {
            for path in results {
                let (meta, outcomes) = read_results(&path)?;
                print_outcomes(&meta.label, &outcomes)?;
            }
        }
        Command::Cost {
            dataset,
            sizes,
            price,
            epochs,
        } => {
            let samples = read_dataset(&dataset)?;
            let model = CostModel {
                price_per_million_tokens: price.unwrap_or(cfg.cost.price_per_million_tokens),
                epochs: epochs.unwrap_or(cfg.cost.epochs),
                ..cfg.cost
            };
            model.validate()?;
            if sizes.is_empty() {
                let tokens = estimate_tokens(&samples, &model, None)?;
                println!(
                    "{} samples  {} tokens  ${:.2}",
                    samples.len(),
                    tokens,
                    estimate_cost(tokens, &model)
                );
            } else {
                println!("{:>8}  {:>10}  {:>8}", "samples", "tokens", "cost");
                for row in cost_curve(&samples, &sizes, &model) {
                    println!(
                        "{:>8}  {:>10}  {:>8}{}",
                        row.samples,
                        row.tokens,
                        format!("${:.2}", row.cost),
                        if row.extrapolated { "  (extrapolated)" } else { "" }
                    );
                }
            }
        }
        Command::Report { manifest } => {
            if !manifest.exists() {
                bail!("manifest {} does not exist", manifest.display());
            }
            print!("{}", report::render_manifest(&Manifest::new(manifest))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
