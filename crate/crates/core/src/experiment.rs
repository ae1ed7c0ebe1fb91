//! Experiment orchestration behind the `ccr` binary: configuration, request
//! planning for the extractor, the method × dataset × run grid, the result
//! store and the summary report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{
    read_activations, read_logits, validate_activations, write_activations, write_jsonl, write_logits,
    ActivationRecord, DumpManifest, LogitRecord, PromptVariant,
};
use crate::error::{Error, Result};
use crate::evaluation::{pairs_to_ranking, ranking_to_pairs, MeanStd, RunMetrics, TaskMetrics};
use crate::losses::{LossKind, TaskBatch};
use crate::probe::{ProbeDocument, Probe};
use crate::prompting::{
    calibrate_pairwise, decide_pair, listwise_decode, mock_embeddings, mock_logits, mock_pair_embeddings,
    pair_request_id, plan_pairs, plan_single, pointwise_ranking, pointwise_score, single_request_id,
    stable_id, ListAggregation, ListwiseOutcome, ListwiseRequest, ListwiseSession, MockListScorer,
    MockLogitConfig, ReplayScorer, StepScorer, DEFAULT_REPEATS,
};
use crate::task::{
    generate_planted, generate_synthetic, load_dataset, pairs_for, Dataset, DatasetKind, PairMode, RankingTask,
    SyntheticKind,
};
use crate::trainer::{
    contrast_batch, evaluate_probe, export_item_scores, normalize_task, single_batch, task_seed, train_kfold, train_probe,
    ItemScore, NormScope, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Probe(LossKind),
    PromptPair,
    PromptSingle,
    PromptList,
}

const METHOD_NAMES: [(&str, Method); 13] = [
    ("origCCS-P", Method::Probe(LossKind::OrigCcsPair)),
    ("origCCS-S", Method::Probe(LossKind::OrigCcsSingle)),
    ("MarginCCR-S", Method::Probe(LossKind::MarginCcr)),
    ("TripletCCR-S", Method::Probe(LossKind::TripletCcr)),
    ("OrdRegCCR-S", Method::Probe(LossKind::OrdRegCcr)),
    ("prompt-P", Method::PromptPair),
    ("prompt-S", Method::PromptSingle),
    ("prompt-L", Method::PromptList),
    ("sup-BCE-P", Method::Probe(LossKind::SupBcePair)),
    ("sup-BCE-S", Method::Probe(LossKind::SupBceSingle)),
    ("sup-MaxMargin-S", Method::Probe(LossKind::SupMaxMargin)),
    ("sup-Triplet-S", Method::Probe(LossKind::SupTriplet)),
    ("sup-CORAL-S", Method::Probe(LossKind::SupCoral)),
];

impl Method {
    /// Every method in report order.
    pub fn all() -> impl Iterator<Item = Method> {
        METHOD_NAMES.iter().map(|(_, m)| *m)
    }

    pub fn name(self) -> &'static str {
        METHOD_NAMES.iter().find(|(_, m)| *m == self).expect("every method is named").0
    }

    fn rank(self) -> usize {
        METHOD_NAMES.iter().position(|(_, m)| *m == self).expect("named")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        METHOD_NAMES
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(s))
            .map(|(_, m)| *m)
            .ok_or_else(|| {
                let known: Vec<&str> = METHOD_NAMES.iter().map(|(n, _)| *n).collect();
                Error::InvalidArgument(format!("unknown method {s:?}; known: {}", known.join(", ")))
            })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticKind),
    Path(PathBuf),
    Planted {
        tasks: usize,
        items: usize,
        #[serde(default)]
        id: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub dim: usize,
    pub noise: f64,
    pub fidelity: f64,
    pub pair_bias: f64,
    pub single_bias: f64,
    pub list_bias: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            dim: 16,
            noise: 0.05,
            fidelity: 0.9,
            pair_bias: 0.0,
            single_bias: 0.0,
            list_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetSpec>,
    pub methods: Vec<Method>,
    pub train: TrainConfig,
    pub runs: usize,
    pub seed: u64,
    pub kfold: Option<usize>,
    pub normalization: NormScope,
    /// Defaults to `<out>/dumps`.
    pub dumps_dir: Option<PathBuf>,
    pub listwise_repeats: usize,
    pub list_aggregation: ListAggregation,
    pub mock: MockConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            datasets: Vec::new(),
            methods: Vec::new(),
            train: TrainConfig::default(),
            runs: 5,
            seed: 0,
            kfold: None,
            normalization: NormScope::PerTask,
            dumps_dir: None,
            listwise_repeats: DEFAULT_REPEATS,
            list_aggregation: ListAggregation::MeanRank,
            mock: MockConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            source_name: path.display().to_string(),
            record: 0,
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() || self.methods.is_empty() {
            return Err(Error::Validation("config needs at least one dataset and one method".into()));
        }
        if self.runs == 0 || self.listwise_repeats == 0 {
            return Err(Error::Validation("runs and listwise_repeats must be at least 1".into()));
        }
        if self.mock.dim == 0 || !(0.0..=1.0).contains(&self.mock.fidelity) || self.mock.noise.is_nan() || self.mock.noise < 0.0 {
            return Err(Error::Validation("mock needs dim >= 1, fidelity in [0, 1] and noise >= 0".into()));
        }
        self.train.validate()
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }

    /// Seed of the listwise session family of one run.
    pub fn list_seed(&self, run: usize) -> u64 {
        self.run_seed(run).wrapping_mul(1000)
    }

    fn fingerprint(&self) -> Result<String> {
        Ok(stable_id(&[&serde_json::to_string(self)?]))
    }
}

/// Resolves the configured dataset specs, keeping only evaluable tasks.
pub fn resolve_datasets(cfg: &ExperimentConfig) -> Result<Vec<Dataset>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for spec in &cfg.datasets {
        let ds = match spec {
            DatasetSpec::Synthetic(kind) => generate_synthetic(*kind, cfg.seed),
            DatasetSpec::Path(p) => load_dataset(p)?.dataset,
            DatasetSpec::Planted { tasks, items, id } => {
                let id = id.clone().unwrap_or_else(|| format!("planted_{tasks}x{items}"));
                generate_planted(&id, *tasks, *items, cfg.seed)?
            }
        };
        if !seen.insert(ds.dataset_id.clone()) {
            return Err(Error::Validation(format!("dataset {} configured twice", ds.dataset_id)));
        }
        let tasks: Vec<RankingTask> = ds.evaluable().cloned().collect();
        if tasks.is_empty() {
            return Err(Error::Validation(format!("dataset {} has no evaluable tasks", ds.dataset_id)));
        }
        out.push(Dataset::new(ds.dataset_id, ds.kind, tasks)?);
    }
    Ok(out)
}

pub const SINGLE_PLAN: &str = "single.jsonl";
pub const PAIR_PLAN: &str = "pair.jsonl";
pub const LIST_PLAN: &str = "list_round0.jsonl";
pub const LIST_PENDING: &str = "list_pending.jsonl";

pub const ACTIVATIONS_SINGLE: &str = "activations_single.jsonl";
pub const ACTIVATIONS_PAIR: &str = "activations_pair.jsonl";
pub const LOGITS_SINGLE: &str = "logits_single.jsonl";
pub const LOGITS_PAIR: &str = "logits_pair.jsonl";
pub const LOGITS_LIST: &str = "logits_list.jsonl";

/// Output directory layout.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
    pub dumps: PathBuf,
}

impl Layout {
    pub fn new(out: impl Into<PathBuf>, cfg: &ExperimentConfig) -> Self {
        let out = out.into();
        let dumps = cfg.dumps_dir.clone().unwrap_or_else(|| out.join("dumps"));
        Layout { out, dumps }
    }

    pub fn plan(&self, ds: &str, file: &str) -> PathBuf {
        self.out.join("plan").join(ds).join(file)
    }

    pub fn dump(&self, ds: &str, file: &str) -> PathBuf {
        self.dumps.join(ds).join(file)
    }

    pub fn cell(&self, ds: &str, method: Method, run: usize) -> PathBuf {
        self.out
            .join("results")
            .join(ds)
            .join(method.name())
            .join(format!("run_{run}.json"))
    }

    pub fn report(&self) -> PathBuf {
        self.out.join("report")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    // write-then-rename so an interrupted run never leaves a half cell
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Listwise round-0 requests of every run and repeat.
pub fn plan_list_round0(task: &RankingTask, cfg: &ExperimentConfig) -> Result<Vec<ListwiseRequest>> {
    let mut out = Vec::new();
    for run in 0..cfg.runs {
        for r in 0..cfg.listwise_repeats {
            let session = ListwiseSession::new(task, crate::prompting::repeat_seed(cfg.list_seed(run), r))?;
            out.push(session.request(task)?);
        }
    }
    Ok(out)
}

/// Writes the extractor request files of every dataset. Returns the paths.
pub fn cmd_plan(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut written = Vec::new();
    for ds in resolve_datasets(cfg)? {
        let id = &ds.dataset_id;
        let doc = layout.plan(id, "dataset.json");
        write_json(&doc, &ds.to_document())?;
        written.push(doc);

        let single: Vec<_> = ds.tasks.iter().flat_map(plan_single).collect();
        let pair: Vec<_> = ds.tasks.iter().flat_map(plan_pairs).collect();
        let list = ds
            .tasks
            .iter()
            .map(|t| plan_list_round0(t, cfg))
            .collect::<Result<Vec<_>>>()?
            .concat();
        for (file, n) in [(SINGLE_PLAN, single.len()), (PAIR_PLAN, pair.len()), (LIST_PLAN, list.len())] {
            let path = layout.plan(id, file);
            match file {
                SINGLE_PLAN => write_jsonl(&path, &single)?,
                PAIR_PLAN => write_jsonl(&path, &pair)?,
                _ => write_jsonl(&path, &list)?,
            }
            debug_assert!(n > 0);
            written.push(path);
        }
    }
    Ok(written)
}

/// Where activations and logits come from.
#[derive(Debug, Clone)]
pub enum Source {
    Mock,
    Dumps,
}

struct DatasetInputs<'a> {
    ds: &'a Dataset,
    cfg: &'a ExperimentConfig,
    layout: &'a Layout,
    source: &'a Source,
}

impl DatasetInputs<'_> {
    fn need(&self, file: &str, plan: &str) -> Result<PathBuf> {
        let dump = self.layout.dump(&self.ds.dataset_id, file);
        if dump.exists() {
            Ok(dump)
        } else {
            Err(Error::MissingDump {
                dump,
                plan: self.layout.plan(&self.ds.dataset_id, plan),
            })
        }
    }

    fn activations(&self, pair: bool) -> Result<Vec<ActivationRecord>> {
        match self.source {
            Source::Mock => mock_dataset_activations(self.ds, &self.cfg.mock, self.cfg.seed, pair),
            Source::Dumps => {
                let (file, plan) = if pair {
                    (ACTIVATIONS_PAIR, PAIR_PLAN)
                } else {
                    (ACTIVATIONS_SINGLE, SINGLE_PLAN)
                };
                let path = self.need(file, plan)?;
                let recs = read_activations(&path)?;
                validate_activations(&recs, &path.display().to_string())?;
                Ok(recs)
            }
        }
    }

    fn logits(&self, variant: PromptVariant) -> Result<Vec<LogitRecord>> {
        match self.source {
            Source::Mock => mock_dataset_logits(self.ds, &self.cfg.mock, self.cfg.seed, variant),
            Source::Dumps => {
                let (file, plan) = if variant == PromptVariant::Pair {
                    (LOGITS_PAIR, PAIR_PLAN)
                } else {
                    (LOGITS_SINGLE, SINGLE_PLAN)
                };
                read_logits(self.need(file, plan)?)
            }
        }
    }

    fn list_responses(&self) -> Result<Vec<LogitRecord>> {
        let path = self.layout.dump(&self.ds.dataset_id, LOGITS_LIST);
        if path.exists() {
            read_logits(path)
        } else {
            Ok(Vec::new())
        }
    }
}

pub fn mock_dataset_activations(ds: &Dataset, mock: &MockConfig, seed: u64, pair: bool) -> Result<Vec<ActivationRecord>> {
    let mut out = Vec::new();
    for t in &ds.tasks {
        if pair {
            out.extend(mock_pair_embeddings(t, mock.dim, mock.noise, seed)?);
        } else {
            out.extend(mock_embeddings(t, mock.dim, mock.noise, seed)?);
        }
    }
    Ok(out)
}

fn mock_logit_config(mock: &MockConfig, seed: u64, bias: f64) -> MockLogitConfig {
    MockLogitConfig {
        fidelity: mock.fidelity,
        bias,
        seed,
    }
}

pub fn mock_dataset_logits(ds: &Dataset, mock: &MockConfig, seed: u64, variant: PromptVariant) -> Result<Vec<LogitRecord>> {
    let bias = match variant {
        PromptVariant::Pair => mock.pair_bias,
        _ => mock.single_bias,
    };
    let cfg = mock_logit_config(mock, seed, bias);
    let mut out = Vec::new();
    for t in &ds.tasks {
        out.extend(mock_logits(t, variant, &cfg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub test_tasks: Vec<String>,
    pub tau_abs: f64,
    pub pairwise_accuracy: f64,
    pub final_loss: f64,
    pub loss_trace: Vec<f64>,
    pub probe: ProbeDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskArtifact {
    pub task_id: String,
    pub item_scores: Vec<ItemScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_trace: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeDocument>,
}

/// One (dataset, method, run) cell of the result store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub dataset_id: String,
    pub dataset_kind: DatasetKind,
    pub method: Method,
    pub run: usize,
    pub seed: u64,
    pub config_fingerprint: String,
    pub metrics: RunMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<Vec<FoldSummary>>,
    pub tasks: Vec<TaskArtifact>,
}

enum CellOutcome {
    Done(Box<CellResult>),
    Pending(Vec<ListwiseRequest>),
}

fn probe_batches(inputs: &DatasetInputs, kind: LossKind) -> Result<Vec<TaskBatch>> {
    let recs = inputs.activations(kind.uses_contrast_pairs())?;
    inputs
        .ds
        .tasks
        .iter()
        .map(|t| {
            if kind.uses_contrast_pairs() {
                contrast_batch(t, &recs)
            } else {
                single_batch(t, &recs)
            }
        })
        .collect()
}

fn run_probe(inputs: &DatasetInputs, kind: LossKind, seed: u64) -> Result<(RunMetrics, Option<Vec<FoldSummary>>, Vec<TaskArtifact>)> {
    let cfg = TrainConfig {
        seed,
        ..inputs.cfg.train.clone()
    };
    let batches = probe_batches(inputs, kind)?;
    if let Some(k) = inputs.cfg.kfold {
        let res = train_kfold(&batches, kind, k, &cfg, inputs.cfg.normalization)?;
        let mut artifacts = Vec::new();
        let mut folds = Vec::new();
        for f in &res.folds {
            for tid in &f.test_tasks {
                let b = batches.iter().find(|b| &b.task_id == tid).expect("fold task exists");
                artifacts.push(TaskArtifact {
                    task_id: tid.clone(),
                    item_scores: export_item_scores(&f.train.probe, &normalize_task(b)?)?,
                    loss_trace: None,
                    probe: None,
                });
            }
            folds.push(FoldSummary {
                fold: f.fold,
                test_tasks: f.test_tasks.clone(),
                tau_abs: f.metrics.tau_abs,
                pairwise_accuracy: f.metrics.pairwise_accuracy,
                final_loss: f.train.final_loss,
                loss_trace: f.train.loss_trace.clone(),
                probe: f.train.probe.to_document(),
            });
        }
        artifacts.sort_by(|a, b| a.task_id.cmp(&b.task_id));
        return Ok((res.overall, Some(folds), artifacts));
    }
    let mut metrics = Vec::new();
    let mut artifacts = Vec::new();
    for b in &batches {
        let b = normalize_task(b)?;
        let task_cfg = TrainConfig {
            seed: task_seed(seed, &b.task_id),
            ..cfg.clone()
        };
        let trained = train_probe(std::slice::from_ref(&b), kind, &task_cfg)?;
        metrics.push(evaluate_probe(&trained.probe, &b)?);
        artifacts.push(TaskArtifact {
            task_id: b.task_id.clone(),
            item_scores: export_item_scores(&trained.probe, &b)?,
            loss_trace: Some(trained.loss_trace),
            probe: Some(trained.probe.to_document()),
        });
    }
    Ok((RunMetrics::from_tasks(metrics)?, None, artifacts))
}

fn scores_artifact(task_id: &str, scores: &[f64]) -> TaskArtifact {
    TaskArtifact {
        task_id: task_id.to_string(),
        item_scores: scores
            .iter()
            .enumerate()
            .map(|(item_index, &score)| ItemScore { item_index, score })
            .collect(),
        loss_trace: None,
        probe: None,
    }
}

fn by_request_id(records: Vec<LogitRecord>) -> BTreeMap<String, LogitRecord> {
    records.into_iter().map(|r| (r.request_id.clone(), r)).collect()
}

fn missing_response(id: &str, task: &str) -> Error {
    Error::Validation(format!("dump has no response to request {id} of task {task}"))
}

fn run_prompt_pair(inputs: &DatasetInputs) -> Result<(RunMetrics, Vec<TaskArtifact>)> {
    let records = by_request_id(inputs.logits(PromptVariant::Pair)?);
    let mut metrics = Vec::new();
    let mut artifacts = Vec::new();
    for t in &inputs.ds.tasks {
        let pairs = pairs_for(t.len(), PairMode::Permutations);
        let matched = pairs
            .iter()
            .map(|&p| {
                let id = pair_request_id(&t.task_id, p);
                records.get(&id).map(|r| (p, r)).ok_or_else(|| missing_response(&id, &t.task_id))
            })
            .collect::<Result<Vec<_>>>()?;
        let decisions: Vec<_> = calibrate_pairwise(&matched)?.iter().map(|c| decide_pair(c).decision).collect();
        let ranking = pairs_to_ranking(t.task_id.clone(), t.len(), &decisions)?;
        metrics.push(TaskMetrics::compute(&ranking, &decisions, t.gold()?)?);
        artifacts.push(scores_artifact(&t.task_id, ranking.item_scores.as_deref().unwrap_or_default()));
    }
    Ok((RunMetrics::from_tasks(metrics)?, artifacts))
}

fn run_prompt_single(inputs: &DatasetInputs) -> Result<(RunMetrics, Vec<TaskArtifact>)> {
    let records = by_request_id(inputs.logits(PromptVariant::Single)?);
    let mut metrics = Vec::new();
    let mut artifacts = Vec::new();
    for t in &inputs.ds.tasks {
        let scores = (0..t.len())
            .map(|i| {
                let id = single_request_id(&t.task_id, i);
                records
                    .get(&id)
                    .ok_or_else(|| missing_response(&id, &t.task_id))
                    .and_then(pointwise_score)
            })
            .collect::<Result<Vec<_>>>()?;
        let ranking = pointwise_ranking(&t.task_id, &scores)?;
        let decisions = ranking_to_pairs(&ranking);
        metrics.push(TaskMetrics::compute(&ranking, &decisions, t.gold()?)?);
        artifacts.push(scores_artifact(&t.task_id, ranking.item_scores.as_deref().unwrap_or_default()));
    }
    Ok((RunMetrics::from_tasks(metrics)?, artifacts))
}

fn run_prompt_list(inputs: &DatasetInputs, run: usize) -> Result<CellOutcomeParts> {
    let cfg = inputs.cfg;
    let mut replay = match inputs.source {
        Source::Dumps => Some(ReplayScorer::new(inputs.list_responses()?)),
        Source::Mock => None,
    };
    let mut metrics = Vec::new();
    let mut artifacts = Vec::new();
    let mut pending = Vec::new();
    for t in &inputs.ds.tasks {
        let mut mock;
        let scorer: &mut dyn StepScorer = match replay.as_mut() {
            Some(r) => r,
            None => {
                mock = MockListScorer::new(t, mock_logit_config(&cfg.mock, cfg.seed, cfg.mock.list_bias))?;
                &mut mock
            }
        };
        match listwise_decode(t, cfg.listwise_repeats, cfg.list_seed(run), scorer, cfg.list_aggregation)? {
            ListwiseOutcome::Done { prediction, .. } => {
                let decisions = ranking_to_pairs(&prediction);
                metrics.push(TaskMetrics::compute(&prediction, &decisions, t.gold()?)?);
                artifacts.push(scores_artifact(&t.task_id, prediction.item_scores.as_deref().unwrap_or_default()));
            }
            ListwiseOutcome::Pending(reqs) => pending.extend(reqs),
        }
    }
    if !pending.is_empty() {
        return Ok(CellOutcomeParts::Pending(pending));
    }
    Ok(CellOutcomeParts::Done(RunMetrics::from_tasks(metrics)?, artifacts))
}

enum CellOutcomeParts {
    Done(RunMetrics, Vec<TaskArtifact>),
    Pending(Vec<ListwiseRequest>),
}

fn run_cell(inputs: &DatasetInputs, method: Method, run: usize, fingerprint: &str) -> Result<CellOutcome> {
    let seed = inputs.cfg.run_seed(run);
    let (metrics, folds, tasks) = match method {
        Method::Probe(kind) => run_probe(inputs, kind, seed)?,
        Method::PromptPair => {
            let (m, a) = run_prompt_pair(inputs)?;
            (m, None, a)
        }
        Method::PromptSingle => {
            let (m, a) = run_prompt_single(inputs)?;
            (m, None, a)
        }
        Method::PromptList => match run_prompt_list(inputs, run)? {
            CellOutcomeParts::Done(m, a) => (m, None, a),
            CellOutcomeParts::Pending(p) => return Ok(CellOutcome::Pending(p)),
        },
    };
    Ok(CellOutcome::Done(Box::new(CellResult {
        dataset_id: inputs.ds.dataset_id.clone(),
        dataset_kind: inputs.ds.kind,
        method,
        run,
        seed,
        config_fingerprint: fingerprint.to_string(),
        metrics,
        folds,
        tasks,
    })))
}

fn read_cell(path: &Path) -> Option<CellResult> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub computed: usize,
    pub skipped: usize,
}

/// Runs every (dataset, method, run) cell not already in the store.
pub fn cmd_run(cfg: &ExperimentConfig, layout: &Layout, source: &Source) -> Result<RunSummary> {
    cfg.validate()?;
    let datasets = resolve_datasets(cfg)?;
    let fingerprint = cfg.fingerprint()?;
    let mut cells = Vec::new();
    for d in 0..datasets.len() {
        for &m in &cfg.methods {
            for r in 0..cfg.runs {
                cells.push((d, m, r));
            }
        }
    }
    let done = |d: usize, m: Method, r: usize| {
        read_cell(&layout.cell(&datasets[d].dataset_id, m, r)).is_some_and(|c| c.config_fingerprint == fingerprint)
    };
    let todo: Vec<_> = cells.iter().copied().filter(|&(d, m, r)| !done(d, m, r)).collect();
    let skipped = cells.len() - todo.len();

    let outcomes: Vec<(usize, Result<CellOutcome>)> = todo
        .par_iter()
        .map(|&(d, m, r)| {
            let inputs = DatasetInputs {
                ds: &datasets[d],
                cfg,
                layout,
                source,
            };
            let out = run_cell(&inputs, m, r, &fingerprint);
            if let Ok(CellOutcome::Done(cell)) = &out {
                if let Err(e) = write_json(&layout.cell(&cell.dataset_id, m, r), cell) {
                    return (d, Err(e));
                }
            }
            (d, out)
        })
        .collect();

    let mut pending: BTreeMap<usize, BTreeMap<String, ListwiseRequest>> = BTreeMap::new();
    let mut computed = 0;
    for (d, out) in outcomes {
        match out? {
            CellOutcome::Done(_) => computed += 1,
            CellOutcome::Pending(reqs) => {
                let slot = pending.entry(d).or_default();
                for q in reqs {
                    slot.insert(q.request_id.clone(), q);
                }
            }
        }
    }
    if let Some((&d, _)) = pending.iter().next() {
        let mut count = 0;
        let mut first = None;
        for (&d2, reqs) in &pending {
            let id = &datasets[d2].dataset_id;
            let path = layout.plan(id, LIST_PENDING);
            write_jsonl(&path, &reqs.values().cloned().collect::<Vec<_>>())?;
            count += reqs.len();
            first.get_or_insert(path);
        }
        return Err(Error::PendingListwise {
            count,
            pending: first.expect("at least one dataset pending"),
            dump: layout.dump(&datasets[d].dataset_id, LOGITS_LIST),
        });
    }
    Ok(RunSummary { computed, skipped })
}

/// Writes every dataset's task document and, with `mock`, a full set of
/// mock dumps (including all listwise step responses) under the dumps dir.
pub fn cmd_synth(cfg: &ExperimentConfig, layout: &Layout, mock: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut written = Vec::new();
    for ds in resolve_datasets(cfg)? {
        let id = &ds.dataset_id;
        let doc = layout.out.join("datasets").join(format!("{id}.json"));
        write_json(&doc, &ds.to_document())?;
        written.push(doc);
        if !mock {
            continue;
        }
        let single = mock_dataset_activations(&ds, &cfg.mock, cfg.seed, false)?;
        let pair = mock_dataset_activations(&ds, &cfg.mock, cfg.seed, true)?;
        write_activations(layout.dump(id, ACTIVATIONS_SINGLE), &single)?;
        write_activations(layout.dump(id, ACTIVATIONS_PAIR), &pair)?;
        write_logits(layout.dump(id, LOGITS_SINGLE), &mock_dataset_logits(&ds, &cfg.mock, cfg.seed, PromptVariant::Single)?)?;
        write_logits(layout.dump(id, LOGITS_PAIR), &mock_dataset_logits(&ds, &cfg.mock, cfg.seed, PromptVariant::Pair)?)?;
        let mut list = Vec::new();
        for t in &ds.tasks {
            for run in 0..cfg.runs {
                let mut scorer = MockListScorer::new(t, mock_logit_config(&cfg.mock, cfg.seed, cfg.mock.list_bias))?;
                if let ListwiseOutcome::Done { records, .. } =
                    listwise_decode(t, cfg.listwise_repeats, cfg.list_seed(run), &mut scorer, cfg.list_aggregation)?
                {
                    list.extend(records);
                }
            }
        }
        write_logits(layout.dump(id, LOGITS_LIST), &list)?;
        let manifest = DumpManifest {
            model: "mock".into(),
            layer: "last".into(),
            dimension: cfg.mock.dim,
            template_id: "default".into(),
        };
        write_json(&layout.dump(id, "manifest.json"), &manifest)?;
        for f in [ACTIVATIONS_SINGLE, ACTIVATIONS_PAIR, LOGITS_SINGLE, LOGITS_PAIR, LOGITS_LIST, "manifest.json"] {
            written.push(layout.dump(id, f));
        }
    }
    Ok(written)
}

/// One row of the summary grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub method: String,
    pub runs: usize,
    pub tau_abs_mean: f64,
    pub tau_abs_std: f64,
    pub pairwise_accuracy_mean: f64,
    pub pairwise_accuracy_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScoreRow {
    pub dataset_id: String,
    pub method: String,
    pub run: usize,
    pub task_id: String,
    pub item_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTraceRow {
    pub dataset_id: String,
    pub method: String,
    pub run: usize,
    /// Task id, or `fold_<f>` under cross-validation.
    pub unit: String,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Per dataset kind × method.
    pub summary: Vec<ReportRow>,
    /// Per dataset × method.
    pub by_dataset: Vec<ReportRow>,
}

/// Loads every cell of the result store in a fixed order.
pub fn load_store(layout: &Layout) -> Result<Vec<CellResult>> {
    let root = layout.out.join("results");
    let mut cells = Vec::new();
    let mut walk = vec![root.clone()];
    while let Some(dir) = walk.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for e in entries {
            let path = e.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                walk.push(path);
            } else if path.extension().is_some_and(|x| x == "json") {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let cell: CellResult = serde_json::from_str(&text).map_err(|e| Error::Parse {
                    source_name: path.display().to_string(),
                    record: 0,
                    message: e.to_string(),
                })?;
                cells.push(cell);
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Validation(format!("result store {} is empty; run `ccr run` first", root.display())));
    }
    cells.sort_by(|a, b| {
        (a.dataset_kind.as_str(), &a.dataset_id, a.method.rank(), a.run)
            .cmp(&(b.dataset_kind.as_str(), &b.dataset_id, b.method.rank(), b.run))
    });
    Ok(cells)
}

fn grid_rows(cells: &[CellResult], group_of: impl Fn(&CellResult) -> String) -> Vec<ReportRow> {
    // group -> method -> run -> per-dataset metrics
    let mut grid: BTreeMap<(String, usize), BTreeMap<usize, Vec<(f64, f64)>>> = BTreeMap::new();
    for c in cells {
        grid.entry((group_of(c), c.method.rank()))
            .or_default()
            .entry(c.run)
            .or_default()
            .push((c.metrics.tau_abs, c.metrics.pairwise_accuracy));
    }
    grid.into_iter()
        .map(|((group, rank), runs)| {
            let (taus, accs): (Vec<f64>, Vec<f64>) = runs
                .values()
                .map(|v| {
                    let n = v.len() as f64;
                    (v.iter().map(|x| x.0).sum::<f64>() / n, v.iter().map(|x| x.1).sum::<f64>() / n)
                })
                .unzip();
            let (t, a) = (MeanStd::of(&taus), MeanStd::of(&accs));
            ReportRow {
                group,
                method: METHOD_NAMES[rank].0.to_string(),
                runs: taus.len(),
                tau_abs_mean: t.mean,
                tau_abs_std: t.std,
                pairwise_accuracy_mean: a.mean,
                pairwise_accuracy_std: a.std,
            }
        })
        .collect()
}

pub fn build_report(cells: &[CellResult]) -> Report {
    Report {
        summary: grid_rows(cells, |c| c.dataset_kind.as_str().to_string()),
        by_dataset: grid_rows(cells, |c| c.dataset_id.clone()),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Validation(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the summary grid, per-dataset rows, item scores and loss traces.
pub fn cmd_report(layout: &Layout) -> Result<Report> {
    let cells = load_store(layout)?;
    let report = build_report(&cells);
    let dir = layout.report();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join("summary.json"), &report.summary)?;
    write_csv(&dir.join("summary.csv"), &report.summary)?;
    write_json(&dir.join("by_dataset.json"), &report.by_dataset)?;
    write_csv(&dir.join("by_dataset.csv"), &report.by_dataset)?;

    let mut scores = Vec::new();
    let mut traces = Vec::new();
    for c in &cells {
        for t in &c.tasks {
            for s in &t.item_scores {
                scores.push(ItemScoreRow {
                    dataset_id: c.dataset_id.clone(),
                    method: c.method.name().into(),
                    run: c.run,
                    task_id: t.task_id.clone(),
                    item_index: s.item_index,
                    score: s.score,
                });
            }
            for (epoch, &loss) in t.loss_trace.iter().flatten().enumerate() {
                traces.push(LossTraceRow {
                    dataset_id: c.dataset_id.clone(),
                    method: c.method.name().into(),
                    run: c.run,
                    unit: t.task_id.clone(),
                    epoch,
                    loss,
                });
            }
        }
        for f in c.folds.iter().flatten() {
            for (epoch, &loss) in f.loss_trace.iter().enumerate() {
                traces.push(LossTraceRow {
                    dataset_id: c.dataset_id.clone(),
                    method: c.method.name().into(),
                    run: c.run,
                    unit: format!("fold_{}", f.fold),
                    epoch,
                    loss,
                });
            }
        }
    }
    write_csv(&dir.join("item_scores.csv"), &scores)?;
    write_csv(&dir.join("loss_traces.csv"), &traces)?;
    Ok(report)
}

/// Parses a trained probe file written into a result cell.
pub fn probe_of(artifact: &TaskArtifact) -> Result<Option<Probe>> {
    artifact.probe.as_ref().map(Probe::from_document).transpose()
}
