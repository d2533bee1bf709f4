//! Experiment driver: the stage-1 scenario matrix, the stage-2 sample-count
//! sweep on target users, and the direct fine-tune control.
//!
//! Every finished unit of work is one [`ManifestRow`] appended to an
//! append-only manifest. Rows are keyed by a digest of (experiment, label,
//! seed, backend kind); a key that already has a completed row is skipped on
//! rerun, so paid remote fine-tunes are never repeated.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    complete_all, submit_finetune, Backend, BackendKind, FineTuneJob, FineTuneRequest,
    Hyperparams, JobStore, Stage, DEFAULT_MAX_IN_FLIGHT,
};
use crate::costing::{estimate_cost, estimate_tokens, CostModel};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, MetricMeans, MetricsReport};
use crate::preprocess::{DayRef, MaskedDay, PreparedDataset};
use crate::promptset::{
    build_dataset, build_test_prompt, build_training_sample, choose_samples, split_days,
    write_dataset, ChatSample, DatasetRequest, PromptVariant,
};
use crate::records::Schema;
use crate::restorer::{restore_and_score, write_results, ResultsMeta, SampleOutcome};

pub const MANIFEST_SCHEMA: Schema = Schema::new("loadpatch.manifest", 1);
pub const DEFAULT_TRAIN_FRAC: f64 = 0.8;
pub const DEFAULT_STAGE2_COUNTS: [usize; 5] = [10, 20, 30, 40, 50];
pub const DIRECT_TRAIN: usize = 68;
pub const DIRECT_TEST: usize = 18;

pub const EXPERIMENT_MATRIX: &str = "matrix";
pub const EXPERIMENT_STAGE2: &str = "stage2";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub label: String,
    pub n_samples: usize,
    pub advanced_prompt: bool,
    pub separate_load_temp: bool,
    pub discard_encoding: bool,
    pub remove_abnormal_days: bool,
}

impl ScenarioConfig {
    pub fn variant(&self) -> PromptVariant {
        PromptVariant {
            advanced: self.advanced_prompt,
            separate_load_temp: self.separate_load_temp,
            discard_encoding: self.discard_encoding,
        }
    }

    /// `"512 Y Y N N"`: sample count then the four switches.
    pub fn flags(&self) -> String {
        let yn = |b: bool| if b { "Y" } else { "N" };
        format!(
            "{} {} {} {} {}",
            self.n_samples,
            yn(self.advanced_prompt),
            yn(self.separate_load_temp),
            yn(self.discard_encoding),
            yn(self.remove_abnormal_days)
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.trim().is_empty() {
            return Err(Error::Config("scenario label is empty".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config(format!("scenario {}: n_samples is 0", self.label)));
        }
        Ok(())
    }
}

/// The seven built-in scenarios. Each one changes a single setting of the
/// previous one.
pub fn presets() -> Vec<ScenarioConfig> {
    let row = |i: usize, n, adv, sep, disc, abn| ScenarioConfig {
        label: format!("scenario{i}"),
        n_samples: n,
        advanced_prompt: adv,
        separate_load_temp: sep,
        discard_encoding: disc,
        remove_abnormal_days: abn,
    };
    vec![
        row(1, 128, false, false, false, false),
        row(2, 256, false, false, false, false),
        row(3, 512, false, false, false, false),
        row(4, 512, true, false, false, false),
        row(5, 512, true, true, false, false),
        row(6, 512, true, true, true, false),
        row(7, 512, true, true, true, true),
    ]
}

pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let wanted = name.to_ascii_lowercase().replace([' ', '_', '-'], "");
    presets()
        .into_iter()
        .find(|p| p.label == wanted)
        .ok_or_else(|| Error::Config(format!("unknown preset {name:?} (scenario1..scenario7)")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagePlan {
    pub stage1_users: Vec<String>,
    pub stage2_targets: Vec<String>,
    pub stage2_sample_counts: Vec<usize>,
    pub direct_control: bool,
    pub train_frac: f64,
}

impl Default for StagePlan {
    fn default() -> Self {
        StagePlan {
            stage1_users: (0..10).map(|i| format!("user{i}")).collect(),
            stage2_targets: vec!["user10".into()],
            stage2_sample_counts: DEFAULT_STAGE2_COUNTS.to_vec(),
            direct_control: true,
            train_frac: DEFAULT_TRAIN_FRAC,
        }
    }
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_users.is_empty() {
            return Err(Error::Config("stage plan has no stage-1 users".into()));
        }
        for t in &self.stage2_targets {
            if self.stage1_users.contains(t) {
                return Err(Error::Config(format!(
                    "target user {t} is also a stage-1 user"
                )));
            }
        }
        if self.stage2_sample_counts.contains(&0) {
            return Err(Error::Config("stage-2 sample counts must be positive".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac {} outside (0, 1)", self.train_frac)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub key: String,
    pub experiment: String,
    pub label: String,
    pub seed: u64,
    pub backend: BackendKind,
    pub scenario: ScenarioConfig,
    /// GPT-FT-1, GPT-FT-2 or GPT-FT-3.
    pub model: String,
    pub status: RowStatus,
    pub error: Option<String>,
    pub job_ids: Vec<String>,
    pub model_id: Option<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub failed_samples: usize,
    pub metrics: Option<MetricMeans>,
    pub trained_tokens: Option<u64>,
    pub cost: Option<f64>,
    /// Relative to the manifest's directory.
    pub results_path: Option<String>,
}

pub fn row_key(experiment: &str, label: &str, seed: u64, backend: BackendKind) -> String {
    let mut h = Sha256::new();
    for part in [experiment.as_bytes(), label.as_bytes()] {
        h.update(part);
        h.update([0]);
    }
    h.update(seed.to_le_bytes());
    h.update(backend.short_name().as_bytes());
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Clone)]
pub struct Manifest {
    path: PathBuf,
}

impl Manifest {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Manifest { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, row: &ManifestRow) -> Result<()> {
        MANIFEST_SCHEMA.append(&self.path, row)
    }

    /// All rows as written, oldest first.
    pub fn history(&self) -> Result<Vec<ManifestRow>> {
        // a freshly touched file counts as empty
        if std::fs::metadata(&self.path).map_or(true, |m| m.len() == 0) {
            return Ok(Vec::new());
        }
        let ((), rows): ((), Vec<ManifestRow>) = MANIFEST_SCHEMA.read(&self.path)?;
        Ok(rows)
    }

    /// Latest row per key, in first-written order.
    pub fn rows(&self) -> Result<Vec<ManifestRow>> {
        let mut order = Vec::new();
        let mut latest: HashMap<String, ManifestRow> = HashMap::new();
        for row in self.history()? {
            if !latest.contains_key(&row.key) {
                order.push(row.key.clone());
            }
            latest.insert(row.key.clone(), row);
        }
        Ok(order.into_iter().filter_map(|k| latest.remove(&k)).collect())
    }

    pub fn completed(&self, key: &str) -> Result<Option<ManifestRow>> {
        Ok(self
            .history()?
            .into_iter()
            .rev()
            .find(|r| r.key == key && r.status == RowStatus::Completed))
    }
}

pub struct Stage1Run {
    pub job: FineTuneJob,
    pub train: Vec<ChatSample>,
    pub test: Vec<ChatSample>,
}

pub struct Stage2Run {
    pub target: String,
    pub count: usize,
    pub job: FineTuneJob,
    pub train: Vec<ChatSample>,
}

pub struct DirectRun {
    pub target: String,
    pub job: FineTuneJob,
    pub train: Vec<ChatSample>,
    pub test: Vec<ChatSample>,
}

pub struct Evaluation {
    pub outcomes: Vec<SampleOutcome>,
    pub report: Option<MetricsReport>,
    pub failed: usize,
    pub results_path: String,
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Shared state for one experiment directory.
pub struct Runner<'a> {
    pub prepared: &'a PreparedDataset,
    pub backend: &'a dyn Backend,
    pub jobs: JobStore,
    pub manifest: Manifest,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub max_in_flight: usize,
    pub cost: CostModel,
    pub hyperparams: Hyperparams,
    days: HashMap<DayRef, &'a MaskedDay>,
}

impl<'a> Runner<'a> {
    pub fn new(
        prepared: &'a PreparedDataset,
        backend: &'a dyn Backend,
        out_dir: &Path,
        seed: u64,
    ) -> Result<Self> {
        for sub in ["datasets", "results"] {
            std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::storage(out_dir, e))?;
        }
        Ok(Runner {
            prepared,
            backend,
            jobs: JobStore::new(out_dir.join("jobs.jsonl")),
            manifest: Manifest::new(out_dir.join("manifest.jsonl")),
            out_dir: out_dir.to_path_buf(),
            seed,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            cost: CostModel::default(),
            hyperparams: Hyperparams::default(),
            days: prepared.days.iter().map(|d| (d.day_ref(), d)).collect(),
        })
    }

    fn user_days(&self, user: &str) -> Vec<&'a MaskedDay> {
        self.prepared.days.iter().filter(|d| d.user_id == user).collect()
    }

    fn require_users(&self, users: &[String]) -> Result<()> {
        for u in users {
            if !self.prepared.days.iter().any(|d| &d.user_id == u) {
                return Err(Error::Precondition(format!(
                    "user {u} is not in the prepared dataset"
                )));
            }
        }
        Ok(())
    }

    fn finetune(
        &self,
        stage: Stage,
        base_model: &str,
        label: &str,
        train: &[ChatSample],
    ) -> Result<FineTuneJob> {
        let path = self.out_dir.join("datasets").join(format!("{}-train.jsonl", slug(label)));
        write_dataset(train, &path)?;
        submit_finetune(
            self.backend,
            &self.jobs,
            &FineTuneRequest {
                stage,
                base_model_id: base_model,
                dataset_path: &path,
                hyperparams: &self.hyperparams,
            },
        )
    }

    /// Fine-tunes the base model on the scenario's stage-1 dataset.
    pub fn run_stage1(&self, plan: &StagePlan, scenario: &ScenarioConfig) -> Result<Stage1Run> {
        plan.validate()?;
        scenario.validate()?;
        self.require_users(&plan.stage1_users)?;
        let built = build_dataset(
            self.prepared,
            &DatasetRequest {
                variant: scenario.variant(),
                users: Some(&plan.stage1_users),
                n_train: Some(scenario.n_samples),
                train_frac: plan.train_frac,
                remove_abnormal: scenario.remove_abnormal_days,
                seed: self.seed,
            },
        )?;
        let job = self.finetune(
            Stage::Stage1,
            self.backend.base_model_id(),
            &scenario.label,
            &built.train,
        )?;
        Ok(Stage1Run {
            job,
            train: built.train,
            test: built.test,
        })
    }

    /// A target user's seeded train pool and test days.
    fn target_split(
        &self,
        plan: &StagePlan,
        target: &str,
        remove_abnormal: bool,
    ) -> Result<(Vec<&'a MaskedDay>, Vec<&'a MaskedDay>)> {
        let days = self.user_days(target);
        if days.is_empty() {
            return Err(Error::Precondition(format!(
                "target user {target} is not in the prepared dataset"
            )));
        }
        let (train, test) = split_days(&days, plan.train_frac, self.seed)?;
        let train = train
            .into_iter()
            .filter(|d| !(remove_abnormal && d.abnormal))
            .collect();
        Ok((train, test))
    }

    fn stage2_one(
        &self,
        plan: &StagePlan,
        scenario: &ScenarioConfig,
        base_model: &str,
        target: &str,
        count: usize,
    ) -> Result<Stage2Run> {
        let (pool, _) = self.target_split(plan, target, scenario.remove_abnormal_days)?;
        // one shuffle per target, so smaller counts are subsets of larger ones
        let chosen = choose_samples(
            &pool,
            count,
            self.seed,
            &format!("stage2:{target}"),
            &format!("stage-2 samples for {target}"),
        )?;
        let train: Vec<ChatSample> = chosen
            .iter()
            .map(|d| build_training_sample(d, scenario.variant()))
            .collect::<Result<_>>()?;
        let label = format!("{target} GPT-FT-2 n={count}");
        let job = self.finetune(Stage::Stage2, base_model, &label, &train)?;
        Ok(Stage2Run {
            target: target.to_string(),
            count,
            job,
            train,
        })
    }

    /// One fine-tune per (target, count), each starting from the stage-1
    /// model. No counts means no jobs.
    pub fn run_stage2(
        &self,
        plan: &StagePlan,
        scenario: &ScenarioConfig,
        base_job: &FineTuneJob,
    ) -> Result<Vec<Stage2Run>> {
        plan.validate()?;
        if base_job.stage != Stage::Stage1 {
            return Err(Error::Dependency(format!(
                "job {} is not a stage-1 job",
                base_job.job_id
            )));
        }
        let base_model = base_job.model_id()?;
        let mut runs = Vec::new();
        for target in &plan.stage2_targets {
            for &count in &plan.stage2_sample_counts {
                runs.push(self.stage2_one(plan, scenario, base_model, target, count)?);
            }
        }
        Ok(runs)
    }

    pub fn target_test_prompts(
        &self,
        plan: &StagePlan,
        scenario: &ScenarioConfig,
        target: &str,
    ) -> Result<Vec<ChatSample>> {
        let (_, test) = self.target_split(plan, target, false)?;
        test.iter()
            .map(|d| build_test_prompt(d, scenario.variant()))
            .collect()
    }

    /// Fine-tunes the base model on target-user data only: 68 training
    /// days, 18 held out.
    pub fn run_direct(
        &self,
        plan: &StagePlan,
        scenario: &ScenarioConfig,
        target: &str,
    ) -> Result<DirectRun> {
        let needed = DIRECT_TRAIN + DIRECT_TEST;
        let available = self.user_days(target).len();
        if available < needed {
            return Err(Error::Capacity {
                what: format!("days for target {target}"),
                needed,
                available,
            });
        }
        let (pool, test) = self.target_split(plan, target, false)?;
        let chosen = choose_samples(
            &pool,
            DIRECT_TRAIN,
            self.seed,
            &format!("direct:{target}"),
            &format!("direct samples for {target}"),
        )?;
        let train: Vec<ChatSample> = chosen
            .iter()
            .map(|d| build_training_sample(d, scenario.variant()))
            .collect::<Result<_>>()?;
        let test: Vec<ChatSample> = test
            .iter()
            .take(DIRECT_TEST)
            .map(|d| build_test_prompt(d, scenario.variant()))
            .collect::<Result<_>>()?;
        let label = format!("{target} GPT-FT-3");
        let job = self.finetune(Stage::Direct, self.backend.base_model_id(), &label, &train)?;
        Ok(DirectRun {
            target: target.to_string(),
            job,
            train,
            test,
        })
    }

    /// Completes, restores and scores every prompt, and writes the
    /// per-sample results file.
    pub fn evaluate(&self, label: &str, model_id: &str, prompts: &[ChatSample]) -> Result<Evaluation> {
        let params = self.prepared.params();
        let completions = complete_all(self.backend, model_id, prompts, self.max_in_flight)?;
        let mut outcomes = Vec::with_capacity(prompts.len());
        for (prompt, completion) in prompts.iter().zip(completions) {
            let day = self
                .days
                .get(&prompt.day_ref)
                .ok_or_else(|| Error::Lookup(prompt.day_ref.to_string()))?;
            outcomes.push(match completion {
                Ok(text) => restore_and_score(&text, day, prompt.variant, params),
                Err(e) => SampleOutcome::Failed {
                    day_ref: prompt.day_ref.clone(),
                    error: e.to_string(),
                },
            });
        }
        let scored: Vec<_> = outcomes.iter().filter_map(|o| o.metrics().copied()).collect();
        let failed = outcomes.len() - scored.len();
        let report = aggregate(&scored, label, failed).ok();
        let results_path = format!("results/{}.jsonl", slug(label));
        write_results(
            &self.out_dir.join(&results_path),
            &ResultsMeta {
                label: label.to_string(),
                model_id: model_id.to_string(),
                params: *params,
            },
            &outcomes,
        )?;
        Ok(Evaluation {
            outcomes,
            report,
            failed,
            results_path,
        })
    }

    fn key(&self, experiment: &str, label: &str) -> String {
        row_key(experiment, label, self.seed, self.backend.kind())
    }

    fn blank_row(&self, experiment: &str, label: &str, scenario: &ScenarioConfig, model: Stage) -> ManifestRow {
        ManifestRow {
            key: self.key(experiment, label),
            experiment: experiment.to_string(),
            label: label.to_string(),
            seed: self.seed,
            backend: self.backend.kind(),
            scenario: scenario.clone(),
            model: model.model_label().to_string(),
            status: RowStatus::Failed,
            error: None,
            job_ids: Vec::new(),
            model_id: None,
            n_train: 0,
            n_test: 0,
            failed_samples: 0,
            metrics: None,
            trained_tokens: None,
            cost: None,
            results_path: None,
        }
    }

    fn fill_row(
        &self,
        row: &mut ManifestRow,
        job: Option<&FineTuneJob>,
        train: &[ChatSample],
        model_id: &str,
        prompts: &[ChatSample],
    ) -> Result<()> {
        if let Some(job) = job {
            row.job_ids.push(job.job_id.clone());
            let tokens = estimate_tokens(train, &self.cost, Some(job))?;
            row.trained_tokens = Some(tokens);
            row.cost = Some(estimate_cost(tokens, &self.cost));
        }
        row.model_id = Some(model_id.to_string());
        row.n_train = train.len();
        row.n_test = prompts.len();
        let eval = self.evaluate(&row.label, model_id, prompts)?;
        row.failed_samples = eval.failed;
        row.results_path = Some(eval.results_path);
        match eval.report {
            Some(r) => {
                row.metrics = Some(r.means);
                row.status = RowStatus::Completed;
            }
            None => {
                row.error = Some(Error::EmptyReport(row.label.clone()).to_string());
            }
        }
        Ok(())
    }

    /// Runs `work` unless `key` already completed; records the row either way
    /// it ends. Storage errors abort, anything else becomes a failed row.
    fn resumable(
        &self,
        mut row: ManifestRow,
        work: impl FnOnce(&mut ManifestRow) -> Result<()>,
    ) -> Result<ManifestRow> {
        if let Some(done) = self.manifest.completed(&row.key)? {
            log::info!("{}: already completed, skipping", row.label);
            return Ok(done);
        }
        if let Err(e) = work(&mut row) {
            if matches!(e, Error::Storage { .. } | Error::Io(_)) {
                return Err(e);
            }
            log::warn!("{}: {e}", row.label);
            row.status = RowStatus::Failed;
            row.metrics = None;
            row.error = Some(e.to_string());
        }
        self.manifest.append(&row)?;
        Ok(row)
    }

    fn scenario_row(&self, plan: &StagePlan, scenario: &ScenarioConfig) -> Result<ManifestRow> {
        let row = self.blank_row(EXPERIMENT_MATRIX, &scenario.label, scenario, Stage::Stage1);
        self.resumable(row, |row| {
            let run = self.run_stage1(plan, scenario)?;
            let model_id = run.job.model_id()?.to_string();
            self.fill_row(row, Some(&run.job), &run.train, &model_id, &run.test)
        })
    }

    /// Each scenario end to end: build, fine-tune, restore, evaluate.
    pub fn run_matrix(&self, plan: &StagePlan, scenarios: &[ScenarioConfig]) -> Result<Vec<ManifestRow>> {
        plan.validate()?;
        scenarios.iter().map(|s| self.scenario_row(plan, s)).collect()
    }

    /// The stage-1 job behind a completed scenario row.
    fn stage1_job(&self, row: &ManifestRow) -> Result<FineTuneJob> {
        let id = row.job_ids.first().ok_or_else(|| {
            Error::Dependency(format!("scenario {} has no stage-1 job", row.label))
        })?;
        self.jobs
            .find(id)?
            .ok_or_else(|| Error::Dependency(format!("job {id} missing from the job store")))
    }

    /// Stage 1 for `scenario` (reused when already done), then for every
    /// target: the stage-1 model as is, one stage-2 model per sample count,
    /// and optionally the direct control.
    pub fn run_stage2_experiment(
        &self,
        plan: &StagePlan,
        scenario: &ScenarioConfig,
    ) -> Result<Vec<ManifestRow>> {
        plan.validate()?;
        let s1 = self.scenario_row(plan, scenario)?;
        let mut rows = Vec::new();
        let base_job = match s1.status {
            RowStatus::Completed => Some(self.stage1_job(&s1)?),
            RowStatus::Failed => None,
        };
        let dependency = || {
            Error::Dependency(format!(
                "stage-1 scenario {} did not complete: {}",
                scenario.label,
                s1.error.as_deref().unwrap_or("unknown")
            ))
        };
        for target in &plan.stage2_targets {
            let label = format!("{target} GPT-FT-1");
            let row = self.blank_row(EXPERIMENT_STAGE2, &label, scenario, Stage::Stage1);
            rows.push(self.resumable(row, |row| {
                let job = base_job.as_ref().ok_or_else(dependency)?;
                let prompts = self.target_test_prompts(plan, scenario, target)?;
                row.job_ids.push(job.job_id.clone());
                self.fill_row(row, None, &[], job.model_id()?, &prompts)
            })?);
            for &count in &plan.stage2_sample_counts {
                let label = format!("{target} GPT-FT-2 n={count}");
                let row = self.blank_row(EXPERIMENT_STAGE2, &label, scenario, Stage::Stage2);
                rows.push(self.resumable(row, |row| {
                    let base = base_job.as_ref().ok_or_else(dependency)?;
                    let run = self.stage2_one(plan, scenario, base.model_id()?, target, count)?;
                    let prompts = self.target_test_prompts(plan, scenario, target)?;
                    let model_id = run.job.model_id()?.to_string();
                    self.fill_row(row, Some(&run.job), &run.train, &model_id, &prompts)
                })?);
            }
            if plan.direct_control {
                let label = format!("{target} GPT-FT-3");
                let row = self.blank_row(EXPERIMENT_STAGE2, &label, scenario, Stage::Direct);
                rows.push(self.resumable(row, |row| {
                    let run = self.run_direct(plan, scenario, target)?;
                    let model_id = run.job.model_id()?.to_string();
                    self.fill_row(row, Some(&run.job), &run.train, &model_id, &run.test)
                })?);
            }
        }
        Ok(rows)
    }
}

impl fmt::Display for ScenarioConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.label, self.flags())
    }
}
