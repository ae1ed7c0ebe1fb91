//! Ranking tasks and datasets: loading, validation, synthetic generation and
//! the pair/triple enumerations the losses consume.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tasks with fewer items than this are dropped on load.
pub const MIN_ITEMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "fact-based")]
    FactBased,
    #[serde(rename = "context-based")]
    ContextBased,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::FactBased => "fact-based",
            DatasetKind::ContextBased => "context-based",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTask {
    pub task_id: String,
    pub dataset_id: String,
    pub criterion: String,
    pub context: Option<String>,
    pub items: Vec<String>,
    pub gold_scores: Option<Vec<f64>>,
    /// Item indices ordered best (highest gold score) first.
    pub gold_ranking: Option<Vec<usize>>,
}

impl RankingTask {
    pub fn new(
        task_id: impl Into<String>,
        dataset_id: impl Into<String>,
        criterion: impl Into<String>,
        context: Option<String>,
        items: Vec<String>,
        gold_scores: Option<Vec<f64>>,
    ) -> Result<Self> {
        let task_id = task_id.into();
        if items.len() < 2 {
            return Err(Error::Validation(format!(
                "task {task_id} has {} items, at least 2 required",
                items.len()
            )));
        }
        let gold_ranking = match &gold_scores {
            Some(scores) => {
                if scores.len() != items.len() {
                    return Err(Error::Dimension {
                        context: format!("gold_scores of task {task_id}"),
                        expected: items.len(),
                        got: scores.len(),
                    });
                }
                if scores.iter().any(|s| !s.is_finite()) {
                    return Err(Error::NonFinite(format!("gold_scores of task {task_id}")));
                }
                Some(ranking_from_scores(scores))
            }
            None => None,
        };
        Ok(RankingTask {
            task_id,
            dataset_id: dataset_id.into(),
            criterion: criterion.into(),
            context,
            items,
            gold_scores,
            gold_ranking,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Exact equality between any two gold scores.
    pub fn has_ties(&self) -> bool {
        match &self.gold_scores {
            Some(scores) => {
                let mut sorted = scores.clone();
                sorted.sort_by(f64::total_cmp);
                sorted.windows(2).any(|w| w[0] == w[1])
            }
            None => false,
        }
    }

    pub fn gold(&self) -> Result<&[usize]> {
        self.gold_ranking
            .as_deref()
            .ok_or_else(|| Error::MissingGold(self.task_id.clone()))
    }

    /// Zero-based position of every item in the gold ranking (0 = best).
    pub fn gold_positions(&self) -> Result<Vec<usize>> {
        Ok(positions_of(self.gold()?))
    }
}

/// Inverse of an ordering: `positions[item] = place of item in order`.
pub fn positions_of(order: &[usize]) -> Vec<usize> {
    let mut positions = vec![0; order.len()];
    for (place, &item) in order.iter().enumerate() {
        positions[item] = place;
    }
    positions
}

fn ranking_from_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dataset_id: String,
    pub kind: DatasetKind,
    pub tasks: Vec<RankingTask>,
}

impl Dataset {
    pub fn new(dataset_id: impl Into<String>, kind: DatasetKind, tasks: Vec<RankingTask>) -> Result<Self> {
        let dataset_id = dataset_id.into();
        let mut seen = HashSet::new();
        for task in &tasks {
            if !seen.insert(task.task_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate task_id {:?} in dataset {dataset_id}",
                    task.task_id
                )));
            }
        }
        Ok(Dataset {
            dataset_id,
            kind,
            tasks,
        })
    }

    /// Tasks usable for evaluation (those with a gold ordering).
    pub fn evaluable(&self) -> impl Iterator<Item = &RankingTask> {
        self.tasks.iter().filter(|t| t.gold_ranking.is_some())
    }

    pub fn to_document(&self) -> DatasetDocument {
        DatasetDocument {
            dataset_id: self.dataset_id.clone(),
            kind: self.kind,
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskDocument {
                    task_id: t.task_id.clone(),
                    criterion: t.criterion.clone(),
                    context: t.context.clone(),
                    items: t.items.clone(),
                    gold_scores: t.gold_scores.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }
}

/// On-disk task file layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDocument {
    pub dataset_id: String,
    pub kind: DatasetKind,
    pub tasks: Vec<TaskDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDocument {
    pub task_id: String,
    pub criterion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub items: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_scores: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemovalReason {
    TooFewItems(usize),
    TiedGoldScores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub removed: Vec<(String, RemovalReason)>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

/// Parses a task document, dropping tasks with fewer than [`MIN_ITEMS`] items
/// or tied gold scores.
pub fn parse_dataset(text: &str, source_name: &str) -> Result<LoadedDataset> {
    let parse_err = |record: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        record,
        message,
    };
    let root: serde_json::Value =
        serde_json::from_str(text).map_err(|e| parse_err(0, format!("invalid JSON: {e}")))?;
    let dataset_id = root
        .get("dataset_id")
        .and_then(|v| v.as_str())
        .ok_or_else(|| parse_err(0, "missing string field \"dataset_id\"".into()))?
        .to_string();
    let kind: DatasetKind = root
        .get("kind")
        .cloned()
        .ok_or_else(|| parse_err(0, "missing field \"kind\"".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| parse_err(0, format!("bad kind: {e}"))))?;
    let records = root
        .get("tasks")
        .and_then(|v| v.as_array())
        .ok_or_else(|| parse_err(0, "missing array field \"tasks\"".into()))?;

    let mut tasks = Vec::with_capacity(records.len());
    let mut removed = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let doc: TaskDocument = serde_json::from_value(record.clone()).map_err(|e| {
            let id = record.get("task_id").and_then(|v| v.as_str()).unwrap_or("?");
            parse_err(i, format!("task {id:?}: {e}"))
        })?;
        if doc.items.len() < MIN_ITEMS {
            removed.push((doc.task_id, RemovalReason::TooFewItems(doc.items.len())));
            continue;
        }
        let task = RankingTask::new(
            doc.task_id,
            dataset_id.clone(),
            doc.criterion,
            doc.context,
            doc.items,
            doc.gold_scores,
        )
        .map_err(|e| parse_err(i, e.to_string()))?;
        if task.has_ties() {
            removed.push((task.task_id, RemovalReason::TiedGoldScores));
            continue;
        }
        tasks.push(task);
    }
    Ok(LoadedDataset {
        dataset: Dataset::new(dataset_id, kind, tasks)?,
        removed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    SynthFacts,
    SynthContext,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "synthfacts" => Ok(SyntheticKind::SynthFacts),
            "synthcontext" => Ok(SyntheticKind::SynthContext),
            other => Err(Error::InvalidArgument(format!("unknown synthetic dataset {other:?}"))),
        }
    }
}

const COLOR_CONTEXT: &str = "Most students selected blue as their favourite color, followed by red, then yellow. \
Brown ranked lowest, green second lowest and purple third lowest";

const WEALTH_CONTEXT: &str = "An owns 100 dollar, Tom owns 50 dollars more and Sam 75 dollars more. \
Jenny is the richest owning 1000 dollar. Emily and Muhammad are at the lower end owning only 5 dollar and 10 dollars respectively.";

/// The two hand-written synthetic datasets. Their content is fixed; `seed`
/// is accepted so every generator shares one signature.
pub fn generate_synthetic(kind: SyntheticKind, _seed: u64) -> Dataset {
    let task = |id: &str, ds: &str, crit: &str, ctx: Option<&str>, items: &[&str], scores: &[f64]| {
        RankingTask::new(
            id,
            ds,
            crit,
            ctx.map(str::to_string),
            items.iter().map(|s| s.to_string()).collect(),
            Some(scores.to_vec()),
        )
        .expect("static synthetic task is valid")
    };
    match kind {
        SyntheticKind::SynthFacts => Dataset {
            dataset_id: "synthfacts".into(),
            kind: DatasetKind::FactBased,
            tasks: vec![
                task(
                    "sentiment",
                    "synthfacts",
                    "sentiment of the adjective",
                    None,
                    &["horrible", "bad", "okay", "good", "great", "awesome"],
                    &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
                ),
                task(
                    "cardinality",
                    "synthfacts",
                    "cardinality of the number",
                    None,
                    &["1", "10", "100", "500", "1000", "10000"],
                    &[1.0, 10.0, 100.0, 500.0, 1000.0, 10000.0],
                ),
            ],
        },
        SyntheticKind::SynthContext => Dataset {
            dataset_id: "synthcontext".into(),
            kind: DatasetKind::ContextBased,
            tasks: vec![
                task(
                    "color_popularity",
                    "synthcontext",
                    "popularity of the color",
                    Some(COLOR_CONTEXT),
                    &["brown", "green", "purple", "yellow", "red", "blue"],
                    &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
                ),
                task(
                    "wealth",
                    "synthcontext",
                    "wealth of people",
                    Some(WEALTH_CONTEXT),
                    &["Emily", "Muhammad", "An", "Tom", "Sam", "Jenny"],
                    &[5.0, 10.0, 100.0, 150.0, 175.0, 1000.0],
                ),
            ],
        },
    }
}

/// Generic numbered tasks whose gold scores are a seeded permutation of
/// `1..=n_items`. Used for planted-direction experiments.
pub fn generate_planted(dataset_id: &str, n_tasks: usize, n_items: usize, seed: u64) -> Result<Dataset> {
    if n_items < 2 || n_tasks == 0 {
        return Err(Error::InvalidArgument(format!(
            "planted dataset needs at least one task of 2+ items, got {n_tasks} x {n_items}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = (0..n_tasks)
        .map(|t| {
            let mut scores: Vec<f64> = (1..=n_items).map(|v| v as f64).collect();
            scores.shuffle(&mut rng);
            RankingTask::new(
                format!("task_{t:03}"),
                dataset_id,
                "planted latent value",
                None,
                (0..n_items).map(|i| format!("item_{i}")).collect(),
                Some(scores),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(dataset_id, DatasetKind::FactBased, tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemPair {
    pub a: usize,
    pub b: usize,
}

/// `anchor` is compared against both `a` and `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemTriple {
    pub anchor: usize,
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairMode {
    #[default]
    Combinations,
    Permutations,
}

pub fn enumerate_pairs(task: &RankingTask, mode: PairMode) -> Vec<ItemPair> {
    pairs_for(task.len(), mode)
}

/// Lexicographic pair enumeration over `n` items.
pub fn pairs_for(n: usize, mode: PairMode) -> Vec<ItemPair> {
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for a in 0..n {
        for b in 0..n {
            let keep = match mode {
                PairMode::Combinations => a < b,
                PairMode::Permutations => a != b,
            };
            if keep {
                out.push(ItemPair { a, b });
            }
        }
    }
    out
}

pub fn enumerate_triples(task: &RankingTask) -> Vec<ItemTriple> {
    triples_for(task.len())
}

/// Every 3-subset, emitted once per choice of anchor.
pub fn triples_for(n: usize) -> Vec<ItemTriple> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                out.push(ItemTriple { anchor: i, a: j, b: k });
                out.push(ItemTriple { anchor: j, a: i, b: k });
                out.push(ItemTriple { anchor: k, a: i, b: j });
            }
        }
    }
    out
}
