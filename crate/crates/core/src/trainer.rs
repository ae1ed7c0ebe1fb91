//! Probe training: seeded initialization, Adam with per-datapoint
//! sub-batches, restarts, k-fold cross-validation and score export.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use std::collections::BTreeMap;

use crate::activations::{z_normalize, ActivationRecord, ItemRef, PromptVariant};
use crate::error::{Error, Result};
use crate::evaluation::{
    pairs_to_ranking, ranking_to_pairs, PairDecision, RankingPrediction, RunMetrics, TaskMetrics,
};
use crate::losses::{evaluate, Datapoint, LossConfig, LossKind, TaskBatch, TaskInputs};
use crate::optim::{Adam, AdamConfig};
use crate::probe::{pair_score, softplus_inv, Probe, ProbeShape};
use crate::task::{ItemPair, PairMode, RankingTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// One optimizer step per pair, triple or task matrix.
    #[default]
    PerDatapoint,
    /// One step per epoch on the mean loss.
    FullBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    #[default]
    PerTask,
    /// Pool all tasks of a fold into one normalization batch.
    PerFold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub restarts: usize,
    pub seed: u64,
    /// Overrides the per-loss pair enumeration of single-prompt pair losses.
    pub pair_mode: Option<PairMode>,
    /// Standard deviation of the initial weights; `1/√d` when unset.
    pub init_scale: Option<f64>,
    pub batching: Batching,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 200,
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            loss: LossConfig::default(),
            restarts: 1,
            seed: 0,
            pair_mode: None,
            init_scale: None,
            batching: Batching::PerDatapoint,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.restarts == 0 {
            return Err(Error::InvalidArgument(format!(
                "epochs and restarts must be at least 1, got {} and {}",
                self.epochs, self.restarts
            )));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub probe: Probe,
    pub final_loss: f64,
    /// Mean loss over all datapoints after each epoch.
    pub loss_trace: Vec<f64>,
    pub seed_used: u64,
}

/// Training seed of one task, so tasks of a run do not share an init.
pub fn task_seed(seed: u64, task_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(task_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Z-normalizes one task's vectors (contrast classes separately).
pub fn normalize_task(batch: &TaskBatch) -> Result<TaskBatch> {
    normalize_pooled(std::slice::from_ref(batch)).map(|mut v| v.remove(0))
}

/// Z-normalizes the vectors of several tasks as a single batch.
pub fn normalize_pooled(batches: &[TaskBatch]) -> Result<Vec<TaskBatch>> {
    let split = |flat: Vec<Vec<f64>>, sizes: &[usize]| {
        let mut it = flat.into_iter();
        sizes.iter().map(|&n| it.by_ref().take(n).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    if batches.iter().all(|b| matches!(b.inputs, TaskInputs::Items(_))) {
        let sizes: Vec<usize> = batches.iter().map(|b| b.n_items).collect();
        let flat: Vec<Vec<f64>> = batches
            .iter()
            .flat_map(|b| match &b.inputs {
                TaskInputs::Items(v) => v.clone(),
                TaskInputs::Contrast { .. } => unreachable!(),
            })
            .collect();
        let parts = split(z_normalize(&flat)?, &sizes);
        return Ok(batches
            .iter()
            .zip(parts)
            .map(|(b, v)| TaskBatch {
                inputs: TaskInputs::Items(v),
                ..b.clone()
            })
            .collect());
    }
    let mut sizes = Vec::new();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for b in batches {
        let TaskInputs::Contrast { pos: p, neg: n, .. } = &b.inputs else {
            return Err(Error::InvalidArgument("cannot pool item and contrast batches".into()));
        };
        sizes.push(p.len());
        pos.extend(p.iter().cloned());
        neg.extend(n.iter().cloned());
    }
    let (pos, neg) = crate::activations::normalize_contrast_classes(&pos, &neg)?;
    let (pos, neg) = (split(pos, &sizes), split(neg, &sizes));
    Ok(batches
        .iter()
        .zip(pos.into_iter().zip(neg))
        .map(|(b, (p, n))| {
            let TaskInputs::Contrast { pairs, .. } = &b.inputs else {
                unreachable!()
            };
            TaskBatch {
                inputs: TaskInputs::Contrast {
                    pairs: pairs.clone(),
                    pos: p,
                    neg: n,
                },
                ..b.clone()
            }
        })
        .collect())
}

/// Builds the item batch of `task` from its single-prompt activations.
pub fn single_batch(task: &RankingTask, records: &[ActivationRecord]) -> Result<TaskBatch> {
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; task.len()];
    for r in records.iter().filter(|r| r.task_id == task.task_id && r.prompt_variant == PromptVariant::Single) {
        let ItemRef::Single(i) = r.item_index else {
            return Err(Error::Validation(format!("single record of {} carries a pair index", task.task_id)));
        };
        let slot = slots.get_mut(i).ok_or_else(|| {
            Error::Validation(format!("item {i} out of range for task {}", task.task_id))
        })?;
        if slot.replace(r.vector.clone()).is_some() {
            return Err(Error::Validation(format!("item {i} of task {} appears twice", task.task_id)));
        }
    }
    let vectors = slots
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::Validation(format!("no activation for item {i} of task {}", task.task_id))))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskBatch::items(task.task_id.clone(), vectors, task.gold_positions().ok()))
}

/// Builds the contrast batch of `task` from its pair_pos / pair_neg records,
/// one entry per ordered pair present in both classes.
pub fn contrast_batch(task: &RankingTask, records: &[ActivationRecord]) -> Result<TaskBatch> {
    let mut pos = BTreeMap::new();
    let mut neg = BTreeMap::new();
    for r in records.iter().filter(|r| r.task_id == task.task_id) {
        let map = match r.prompt_variant {
            PromptVariant::PairPos => &mut pos,
            PromptVariant::PairNeg => &mut neg,
            _ => continue,
        };
        let ItemRef::Pair([a, b]) = r.item_index else {
            return Err(Error::Validation(format!("pair record of {} carries a single index", task.task_id)));
        };
        if a >= task.len() || b >= task.len() || a == b {
            return Err(Error::Validation(format!("pair ({a}, {b}) invalid for task {}", task.task_id)));
        }
        if map.insert((a, b), r.vector.clone()).is_some() {
            return Err(Error::Validation(format!("pair ({a}, {b}) of task {} appears twice", task.task_id)));
        }
    }
    if pos.keys().ne(neg.keys()) {
        return Err(Error::Validation(format!("pair_pos and pair_neg records of {} do not match", task.task_id)));
    }
    if pos.is_empty() {
        return Err(Error::Validation(format!("no pair activations for task {}", task.task_id)));
    }
    let pairs = pos.keys().map(|&(a, b)| ItemPair { a, b }).collect();
    Ok(TaskBatch {
        task_id: task.task_id.clone(),
        n_items: task.len(),
        inputs: TaskInputs::Contrast {
            pairs,
            pos: pos.into_values().collect(),
            neg: neg.into_values().collect(),
        },
        gold_positions: task.gold_positions().ok(),
    })
}

fn check_batches(batches: &[TaskBatch], kind: LossKind) -> Result<usize> {
    let first = batches
        .first()
        .ok_or_else(|| Error::InvalidArgument("no activations to train on".into()))?;
    let dim = first.dim();
    if dim == 0 {
        return Err(Error::InvalidArgument(format!("task {} has no vectors", first.task_id)));
    }
    for b in batches {
        if b.dim() != dim {
            return Err(Error::Dimension {
                context: format!("activations of task {}", b.task_id),
                expected: dim,
                got: b.dim(),
            });
        }
        let contrast = matches!(b.inputs, TaskInputs::Contrast { .. });
        if contrast != kind.uses_contrast_pairs() {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} cannot train on the inputs of task {}",
                b.task_id
            )));
        }
        if kind.is_supervised() && b.gold_positions.is_none() {
            return Err(Error::MissingGold(b.task_id.clone()));
        }
    }
    Ok(dim)
}

fn initial_params(shape: ProbeShape, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, scale).expect("finite positive scale");
    let dim = shape.dim();
    let mut params: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    match shape {
        ProbeShape::Linear { .. } => params.push(0.0),
        ProbeShape::Coral { .. } => {
            // alpha = beta = 1
            params.push(softplus_inv(1.0));
            params.push(softplus_inv(1.0));
        }
    }
    params
}

fn mean_loss(
    kind: LossKind,
    params: &[f64],
    batches: &[TaskBatch],
    points: &[Datapoint],
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut grad = vec![0.0; params.len()];
    for &p in points {
        let v = evaluate(kind, params, batches, p, cfg)?;
        total += v.total;
        grad.iter_mut().zip(&v.gradient).for_each(|(a, g)| *a += g);
    }
    let n = points.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

/// All loss datapoints of the given tasks, in task order.
pub fn training_datapoints(batches: &[TaskBatch], kind: LossKind, pair_mode: Option<PairMode>) -> Vec<Datapoint> {
    batches
        .iter()
        .enumerate()
        .flat_map(|(t, b)| kind.datapoints_with(t, b, pair_mode))
        .collect()
}

/// Trains one probe on (already normalized) task batches. With several
/// restarts the run with the lowest final loss is kept.
pub fn train_probe(batches: &[TaskBatch], kind: LossKind, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let dim = check_batches(batches, kind)?;
    let shape = kind.shape(dim);
    let points = training_datapoints(batches, kind, cfg.pair_mode);
    if points.is_empty() {
        return Err(Error::InvalidArgument(format!("{kind:?} has no datapoints")));
    }
    let scale = cfg.init_scale.unwrap_or(1.0 / (dim as f64).sqrt());

    let mut best: Option<TrainResult> = None;
    for restart in 0..cfg.restarts {
        let seed = cfg.seed.wrapping_add(restart as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = initial_params(shape, scale, &mut rng);
        let mut adam = Adam::new(params.len(), cfg.adam());
        let mut order = points.clone();
        let mut trace = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            match cfg.batching {
                Batching::PerDatapoint => {
                    order.shuffle(&mut rng);
                    for &p in &order {
                        let v = evaluate(kind, &params, batches, p, &cfg.loss)?;
                        adam.step(&mut params, &v.gradient);
                    }
                }
                Batching::FullBatch => {
                    let (_, grad) = mean_loss(kind, &params, batches, &points, &cfg.loss)?;
                    adam.step(&mut params, &grad);
                }
            }
            let (loss, _) = mean_loss(kind, &params, batches, &points, &cfg.loss)?;
            if !loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite(format!("{kind:?} training (seed {seed})")));
            }
            trace.push(loss);
        }
        let result = TrainResult {
            probe: shape.to_probe(&params),
            final_loss: *trace.last().expect("epochs >= 1"),
            loss_trace: trace,
            seed_used: seed,
        };
        if best.as_ref().is_none_or(|b| result.final_loss < b.final_loss) {
            best = Some(result);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// A probe's ranking of one task plus the pairwise decisions it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrediction {
    pub ranking: RankingPrediction,
    pub decisions: Vec<PairDecision>,
}

pub fn predict_task(probe: &Probe, batch: &TaskBatch) -> Result<TaskPrediction> {
    match &batch.inputs {
        TaskInputs::Items(vectors) => {
            let ranking = RankingPrediction::from_scores(batch.task_id.clone(), probe.item_scores(vectors)?);
            let decisions = ranking_to_pairs(&ranking);
            Ok(TaskPrediction { ranking, decisions })
        }
        TaskInputs::Contrast { pairs, pos, neg } => {
            let Probe::Linear(p) = probe else {
                return Err(Error::InvalidArgument("contrast pairs need a linear probe".into()));
            };
            let decisions = pairs
                .iter()
                .zip(pos.iter().zip(neg))
                .map(|(pair, (xp, xn))| {
                    let s = pair_score(p.score(xp)?, p.score(xn)?);
                    Ok(PairDecision {
                        a: pair.a,
                        b: pair.b,
                        winner: if s > 0.5 { pair.a } else { pair.b },
                        a_score: s,
                        b_score: 1.0 - s,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let ranking = pairs_to_ranking(batch.task_id.clone(), batch.n_items, &decisions)?;
            Ok(TaskPrediction { ranking, decisions })
        }
    }
}

fn gold_order(batch: &TaskBatch) -> Result<Vec<usize>> {
    let pos = batch
        .gold_positions
        .as_ref()
        .ok_or_else(|| Error::MissingGold(batch.task_id.clone()))?;
    let mut order = vec![0; pos.len()];
    for (item, &place) in pos.iter().enumerate() {
        order[place] = item;
    }
    Ok(order)
}

pub fn evaluate_probe(probe: &Probe, batch: &TaskBatch) -> Result<TaskMetrics> {
    let pred = predict_task(probe, batch)?;
    TaskMetrics::compute(&pred.ranking, &pred.decisions, &gold_order(batch)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub item_index: usize,
    pub score: f64,
}

/// Per-item ranking scores for plotting. Contrast-pair probes report each
/// item's number of won comparisons.
pub fn export_item_scores(probe: &Probe, batch: &TaskBatch) -> Result<Vec<ItemScore>> {
    let pred = predict_task(probe, batch)?;
    let scores = pred.ranking.item_scores.unwrap_or_default();
    Ok(scores
        .into_iter()
        .enumerate()
        .map(|(item_index, score)| ItemScore { item_index, score })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub test_tasks: Vec<String>,
    pub train: TrainResult,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KFoldResult {
    pub folds: Vec<FoldResult>,
    /// Held-out metrics pooled over every task of every fold.
    pub overall: RunMetrics,
}

/// Seeded partition of `n` task indices into `k` folds of near-equal size.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} tasks cannot fill {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, t) in idx.into_iter().enumerate() {
        folds[i % k].push(t);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Trains on k−1 folds (datapoints pooled across tasks) and evaluates on the
/// held-out fold. `batches` are raw; normalization follows `scope`.
pub fn train_kfold(
    batches: &[TaskBatch],
    kind: LossKind,
    k: usize,
    cfg: &TrainConfig,
    scope: NormScope,
) -> Result<KFoldResult> {
    let folds = fold_assignment(batches.len(), k, cfg.seed)?;
    let normalize = |set: Vec<TaskBatch>| -> Result<Vec<TaskBatch>> {
        match scope {
            NormScope::PerTask => set.iter().map(normalize_task).collect(),
            NormScope::PerFold => normalize_pooled(&set),
        }
    };
    let mut results = Vec::with_capacity(k);
    let mut all = Vec::new();
    for (f, test_idx) in folds.iter().enumerate() {
        let train: Vec<TaskBatch> = (0..batches.len())
            .filter(|i| !test_idx.contains(i))
            .map(|i| batches[i].clone())
            .collect();
        let test: Vec<TaskBatch> = test_idx.iter().map(|&i| batches[i].clone()).collect();
        let train = normalize(train)?;
        let test = normalize(test)?;
        let fold_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(1000 * f as u64),
            ..cfg.clone()
        };
        let trained = train_probe(&train, kind, &fold_cfg)?;
        let per_task = test
            .iter()
            .map(|b| evaluate_probe(&trained.probe, b))
            .collect::<Result<Vec<_>>>()?;
        all.extend(per_task.iter().cloned());
        results.push(FoldResult {
            fold: f,
            test_tasks: test.iter().map(|b| b.task_id.clone()).collect(),
            train: trained,
            metrics: RunMetrics::from_tasks(per_task)?,
        });
    }
    Ok(KFoldResult {
        folds: results,
        overall: RunMetrics::from_tasks(all)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::LinearProbe;

    fn toy_batch() -> TaskBatch {
        let vectors = (0..5).map(|i| vec![i as f64, (i * i) as f64 * 0.1, 1.0 - i as f64]).collect();
        TaskBatch::items("toy", vectors, Some(vec![4, 3, 2, 1, 0]))
    }

    #[test]
    fn training_is_deterministic() {
        let b = normalize_task(&toy_batch()).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            seed: 11,
            ..TrainConfig::default()
        };
        let r1 = train_probe(&[b.clone()], LossKind::MarginCcr, &cfg).unwrap();
        let r2 = train_probe(&[b], LossKind::MarginCcr, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.loss_trace.len(), 5);
    }

    #[test]
    fn restarts_keep_lowest_loss() {
        let b = normalize_task(&toy_batch()).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            restarts: 4,
            seed: 2,
            ..TrainConfig::default()
        };
        let best = train_probe(&[b.clone()], LossKind::TripletCcr, &cfg).unwrap();
        for r in 0..4 {
            let single = train_probe(
                &[b.clone()],
                LossKind::TripletCcr,
                &TrainConfig {
                    restarts: 1,
                    seed: 2 + r,
                    ..cfg.clone()
                },
            )
            .unwrap();
            assert!(best.final_loss <= single.final_loss);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = TrainConfig::default();
        assert!(train_probe(&[], LossKind::MarginCcr, &cfg).is_err());
        let mut other = toy_batch();
        other.inputs = TaskInputs::Items(vec![vec![0.0; 2]; 5]);
        assert!(matches!(
            train_probe(&[toy_batch(), other], LossKind::MarginCcr, &cfg),
            Err(Error::Dimension { .. })
        ));
        let mut nogold = toy_batch();
        nogold.gold_positions = None;
        assert!(matches!(
            train_probe(&[nogold], LossKind::SupMaxMargin, &cfg),
            Err(Error::MissingGold(_))
        ));
        assert!(train_probe(&[toy_batch()], LossKind::OrigCcsPair, &cfg).is_err());
    }

    #[test]
    fn fold_partition() {
        let folds = fold_assignment(8, 4, 3).unwrap();
        assert!(folds.iter().all(|f| f.len() == 2));
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert!(fold_assignment(8, 1, 0).is_err());
        assert!(fold_assignment(3, 4, 0).is_err());
    }

    #[test]
    fn zero_probe_exports_half() {
        let probe = Probe::Linear(LinearProbe::zeros(3));
        let scores = export_item_scores(&probe, &toy_batch()).unwrap();
        assert_eq!(scores.len(), 5);
        assert!(scores.iter().all(|s| s.score == 0.5));
    }

    #[test]
    fn pooled_normalization_splits_back() {
        let a = toy_batch();
        let mut b = toy_batch();
        b.task_id = "other".into();
        let pooled = normalize_pooled(&[a, b]).unwrap();
        assert_eq!(pooled.len(), 2);
        assert_eq!(pooled[0].n_items, 5);
        assert_eq!(pooled[1].task_id, "other");
    }

    #[test]
    fn planted_training_lowers_the_loss() {
        let ds = crate::task::generate_planted("p", 3, 6, 4).unwrap();
        for task in &ds.tasks {
            let recs = crate::prompting::mock_embeddings(task, 8, 0.05, 4).unwrap();
            let b = normalize_task(&single_batch(task, &recs).unwrap()).unwrap();
            for kind in [LossKind::OrigCcsSingle, LossKind::MarginCcr, LossKind::TripletCcr, LossKind::OrdRegCcr] {
                let cfg = TrainConfig {
                    epochs: 50,
                    seed: 5,
                    ..TrainConfig::default()
                };
                let r = train_probe(&[b.clone()], kind, &cfg).unwrap();
                // same draw as the restart inside train_probe
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let init = initial_params(kind.shape(8), 1.0 / 8f64.sqrt(), &mut rng);
                let points = training_datapoints(&[b.clone()], kind, None);
                let (start, _) = mean_loss(kind, &init, &[b.clone()], &points, &cfg.loss).unwrap();
                assert!(r.loss_trace.iter().all(|l| l.is_finite()));
                assert!(r.final_loss <= start, "{kind:?}: {} > {start}", r.final_loss);
            }
        }
    }
}
