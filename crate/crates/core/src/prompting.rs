//! Prompting baselines over candidate-token logits: pairwise calibration,
//! pointwise scale scoring, step-wise listwise decoding, prompt templates and
//! a deterministic mock language model.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activations::{ActivationRecord, ItemRef, LogitRecord, PromptVariant};
use crate::error::{Error, Result};
use crate::evaluation::{PairDecision, RankingPrediction};
use crate::task::{pairs_for, ItemPair, PairMode, RankingTask};

/// Stand-in for the comparison token `X` in rendered prompts.
pub const PLACEHOLDER: &str = "[MASK]";
pub const YES: &str = "Yes";
pub const NO: &str = "No";
pub const DEFAULT_REPEATS: usize = 5;

/// Stable short id: hex SHA-256 over the unit-separated key parts.
pub fn stable_id(parts: &[&str]) -> String {
    let digest = Sha256::digest(parts.join("\u{1f}").as_bytes());
    hex::encode(&digest[..8])
}

fn seed_from(parts: &[&str]) -> u64 {
    let digest = Sha256::digest(parts.join("\u{1f}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn single_request_id(task_id: &str, item: usize) -> String {
    stable_id(&["single", task_id, &item.to_string()])
}

pub fn pair_request_id(task_id: &str, pair: ItemPair) -> String {
    stable_id(&["pair", task_id, &pair.a.to_string(), &pair.b.to_string()])
}

pub fn scale_candidates() -> Vec<String> {
    (0..=10).map(|v| v.to_string()).collect()
}

fn with_context(task: &RankingTask, body: String) -> String {
    match &task.context {
        Some(ctx) => format!("{} {body}", ctx.trim()),
        None => body,
    }
}

pub fn render_single(task: &RankingTask, item: usize) -> String {
    with_context(
        task,
        format!(
            "On a scale from 0 to 10, the {} of {} is {PLACEHOLDER}",
            task.criterion, task.items[item]
        ),
    )
}

pub fn render_pair(task: &RankingTask, pair: ItemPair) -> String {
    with_context(
        task,
        format!(
            "Is {} more in terms of {} than {}? {PLACEHOLDER}",
            task.items[pair.a], task.criterion, task.items[pair.b]
        ),
    )
}

/// Option label of the `i`-th listed item.
pub fn option_label(i: usize) -> Result<String> {
    if i >= 26 {
        return Err(Error::InvalidArgument(format!("listwise prompts support at most 26 options, got index {i}")));
    }
    Ok(char::from(b'A' + i as u8).to_string())
}

/// Listwise prompt with the options in `option_order` and the labels
/// already chosen appended after the answer cue.
pub fn render_list(task: &RankingTask, option_order: &[usize], chosen_labels: &[String]) -> Result<String> {
    let options = option_order
        .iter()
        .enumerate()
        .map(|(i, &item)| Ok(format!("\"{}\" {}", option_label(i)?, task.items[item])))
        .collect::<Result<Vec<_>>>()?
        .join(", ");
    let mut text = String::new();
    if let Some(ctx) = &task.context {
        text.push_str(ctx.trim().trim_end_matches('.'));
        text.push_str(". ");
    }
    text.push_str(&format!(
        "Order by {}. Options: {options}. The correct ordering is:",
        task.criterion
    ));
    for l in chosen_labels {
        text.push_str(&format!(" \"{l}\""));
    }
    Ok(text)
}

/// Request consumed by the extractor for single and pair prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub request_id: String,
    pub task_id: String,
    pub prompt_variant: PromptVariant,
    pub item_index: ItemRef,
    pub prompt_text: String,
    pub candidates: Vec<String>,
    /// Fillers for the placeholder when embedding the two contrast prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<[String; 2]>,
}

pub fn plan_single(task: &RankingTask) -> Vec<PromptRequest> {
    (0..task.len())
        .map(|i| PromptRequest {
            request_id: single_request_id(&task.task_id, i),
            task_id: task.task_id.clone(),
            prompt_variant: PromptVariant::Single,
            item_index: ItemRef::Single(i),
            prompt_text: render_single(task, i),
            candidates: scale_candidates(),
            contrast: None,
        })
        .collect()
}

/// One request per ordered pair.
pub fn plan_pairs(task: &RankingTask) -> Vec<PromptRequest> {
    pairs_for(task.len(), PairMode::Permutations)
        .into_iter()
        .map(|p| PromptRequest {
            request_id: pair_request_id(&task.task_id, p),
            task_id: task.task_id.clone(),
            prompt_variant: PromptVariant::Pair,
            item_index: ItemRef::Pair([p.a, p.b]),
            prompt_text: render_pair(task, p),
            candidates: vec![YES.into(), NO.into()],
            contrast: Some([YES.into(), NO.into()]),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPair {
    pub pair: ItemPair,
    pub yes_score: f64,
    pub no_score: f64,
}

/// Subtracts the mean "Yes" and mean "No" logit over all pair prompts of a
/// task from every prompt's logits.
pub fn calibrate_pairwise(records: &[(ItemPair, &LogitRecord)]) -> Result<Vec<CalibratedPair>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no pair records to calibrate".into()));
    }
    let raw = records
        .iter()
        .map(|(p, r)| Ok((*p, r.logit(YES)?, r.logit(NO)?)))
        .collect::<Result<Vec<_>>>()?;
    let n = raw.len() as f64;
    let mean_yes = raw.iter().map(|r| r.1).sum::<f64>() / n;
    let mean_no = raw.iter().map(|r| r.2).sum::<f64>() / n;
    Ok(raw
        .into_iter()
        .map(|(pair, y, no)| CalibratedPair {
            pair,
            yes_score: y - mean_yes,
            no_score: no - mean_no,
        })
        .collect())
}

/// Uncalibrated reading of the same records.
pub fn raw_pairs(records: &[(ItemPair, &LogitRecord)]) -> Result<Vec<CalibratedPair>> {
    records
        .iter()
        .map(|(pair, r)| {
            Ok(CalibratedPair {
                pair: *pair,
                yes_score: r.logit(YES)?,
                no_score: r.logit(NO)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub decision: PairDecision,
    /// `yes − no`.
    pub score: f64,
    /// Exact tie, resolved in favour of B.
    pub tied: bool,
}

pub fn decide_pair(p: &CalibratedPair) -> PairOutcome {
    let a_wins = p.yes_score > p.no_score;
    PairOutcome {
        decision: PairDecision {
            a: p.pair.a,
            b: p.pair.b,
            winner: if a_wins { p.pair.a } else { p.pair.b },
            a_score: p.yes_score,
            b_score: p.no_score,
        },
        score: p.yes_score - p.no_score,
        tied: p.yes_score == p.no_score,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointScore {
    pub rank_value: u32,
    pub tiebreak: f64,
    /// Several candidates shared the maximum logit.
    pub tied: bool,
}

/// Argmax over the candidates "0".."10"; the lowest candidate wins exact ties.
pub fn pointwise_score(record: &LogitRecord) -> Result<PointScore> {
    let mut best: Option<(u32, f64)> = None;
    let mut tied = false;
    for c in 0..=10u32 {
        let l = record.logit(&c.to_string())?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("logit {c} of {}", record.request_id)));
        }
        match best {
            Some((_, b)) if l == b => tied = true,
            Some((_, b)) if l < b => {}
            _ => {
                best = Some((c, l));
                tied = false;
            }
        }
    }
    let (rank_value, tiebreak) = best.expect("eleven candidates");
    Ok(PointScore {
        rank_value,
        tiebreak,
        tied,
    })
}

/// Orders items by scale value, then by the winning logit, then by index.
pub fn pointwise_ranking(task_id: &str, scores: &[PointScore]) -> Result<RankingPrediction> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .rank_value
            .cmp(&scores[i].rank_value)
            .then(scores[j].tiebreak.total_cmp(&scores[i].tiebreak))
            .then(i.cmp(&j))
    });
    let mut pred = RankingPrediction::new(task_id, order)?;
    pred.flagged_ties = pred
        .order
        .windows(2)
        .filter(|w| scores[w[0]].rank_value == scores[w[1]].rank_value && scores[w[0]].tiebreak == scores[w[1]].tiebreak)
        .count()
        + scores.iter().filter(|s| s.tied).count();
    pred.item_scores = Some(scores.iter().map(|s| s.rank_value as f64).collect());
    Ok(pred)
}

/// One step of the listwise exchange protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListwiseRequest {
    pub request_id: String,
    pub task_id: String,
    pub step: usize,
    pub prompt_text: String,
    pub candidates: Vec<String>,
}

/// State of one shuffled listwise decode.
#[derive(Debug, Clone, PartialEq)]
pub struct ListwiseSession {
    pub task_id: String,
    /// Item shown under label `i`.
    pub option_order: Vec<usize>,
    /// Labels not yet chosen, in listing order.
    pub remaining: Vec<String>,
    pub chosen: Vec<String>,
    pub seed: u64,
}

impl ListwiseSession {
    pub fn new(task: &RankingTask, seed: u64) -> Result<Self> {
        let mut option_order: Vec<usize> = (0..task.len()).collect();
        option_order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let remaining = (0..task.len()).map(option_label).collect::<Result<Vec<_>>>()?;
        Ok(ListwiseSession {
            task_id: task.task_id.clone(),
            option_order,
            remaining,
            chosen: Vec::new(),
            seed,
        })
    }

    pub fn is_done(&self) -> bool {
        self.remaining.is_empty()
    }

    fn item_of(&self, label: &str) -> usize {
        let i = usize::from(label.as_bytes()[0] - b'A');
        self.option_order[i]
    }

    pub fn request(&self, task: &RankingTask) -> Result<ListwiseRequest> {
        let step = self.chosen.len();
        let order: Vec<String> = self.option_order.iter().map(|i| i.to_string()).collect();
        let mut key = vec!["list", &self.task_id];
        key.extend(order.iter().map(String::as_str));
        key.push("|");
        key.extend(self.chosen.iter().map(String::as_str));
        Ok(ListwiseRequest {
            request_id: stable_id(&key),
            task_id: self.task_id.clone(),
            step,
            prompt_text: render_list(task, &self.option_order, &self.chosen)?,
            candidates: self.remaining.clone(),
        })
    }

    /// Picks the highest-logit remaining label (earliest listed on ties).
    pub fn apply(&mut self, record: &LogitRecord) -> Result<String> {
        let keys: BTreeSet<&String> = record.candidate_logits.keys().collect();
        let want: BTreeSet<&String> = self.remaining.iter().collect();
        if keys != want {
            return Err(Error::Validation(format!(
                "listwise record {} covers {:?}, expected {:?}",
                record.request_id, keys, want
            )));
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, label) in self.remaining.iter().enumerate() {
            let l = record.candidate_logits[label];
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("listwise record {}", record.request_id)));
            }
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((i, l));
            }
        }
        let label = self.remaining.remove(best.expect("non-empty").0);
        self.chosen.push(label.clone());
        Ok(label)
    }

    /// Items in chosen order.
    pub fn ranking(&self) -> Vec<usize> {
        self.chosen.iter().map(|l| self.item_of(l)).collect()
    }
}

/// Source of listwise step logits. `Ok(None)` means the response is not
/// available yet.
pub trait StepScorer {
    fn score(&mut self, request: &ListwiseRequest) -> Result<Option<LogitRecord>>;
}

impl<F: FnMut(&ListwiseRequest) -> Result<Option<LogitRecord>>> StepScorer for F {
    fn score(&mut self, request: &ListwiseRequest) -> Result<Option<LogitRecord>> {
        self(request)
    }
}

/// Looks up responses by request id.
#[derive(Debug, Clone, Default)]
pub struct ReplayScorer {
    pub responses: BTreeMap<String, LogitRecord>,
}

impl ReplayScorer {
    pub fn new(records: Vec<LogitRecord>) -> Self {
        ReplayScorer {
            responses: records.into_iter().map(|r| (r.request_id.clone(), r)).collect(),
        }
    }
}

impl StepScorer for ReplayScorer {
    fn score(&mut self, request: &ListwiseRequest) -> Result<Option<LogitRecord>> {
        Ok(self.responses.get(&request.request_id).cloned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListAggregation {
    /// Mean position; ties go to the earlier first-repeat position.
    #[default]
    MeanRank,
    /// Summed `N − 1 − position` points; ties go to the lower item index.
    Borda,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ListwiseOutcome {
    Done {
        prediction: RankingPrediction,
        repeats: Vec<Vec<usize>>,
        records: Vec<LogitRecord>,
    },
    /// Requests still waiting for a response.
    Pending(Vec<ListwiseRequest>),
}

/// Seed of repeat `r` of a session family.
pub fn repeat_seed(seed: u64, r: usize) -> u64 {
    seed.wrapping_add(r as u64)
}

pub fn listwise_decode(
    task: &RankingTask,
    repeats: usize,
    seed: u64,
    scorer: &mut dyn StepScorer,
    aggregation: ListAggregation,
) -> Result<ListwiseOutcome> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("listwise decoding needs at least one repeat".into()));
    }
    let mut orders = Vec::with_capacity(repeats);
    let mut pending = Vec::new();
    let mut records = Vec::new();
    for r in 0..repeats {
        let mut session = ListwiseSession::new(task, repeat_seed(seed, r))?;
        while !session.is_done() {
            let req = session.request(task)?;
            match scorer.score(&req)? {
                Some(rec) => {
                    if rec.request_id != req.request_id {
                        return Err(Error::Validation(format!(
                            "response {} does not answer request {}",
                            rec.request_id, req.request_id
                        )));
                    }
                    session.apply(&rec)?;
                    records.push(rec);
                }
                None => {
                    pending.push(req);
                    break;
                }
            }
        }
        if session.is_done() {
            orders.push(session.ranking());
        }
    }
    if !pending.is_empty() {
        return Ok(ListwiseOutcome::Pending(pending));
    }
    let prediction = aggregate_orders(&task.task_id, task.len(), &orders, aggregation)?;
    Ok(ListwiseOutcome::Done {
        prediction,
        repeats: orders,
        records,
    })
}

pub fn aggregate_orders(
    task_id: &str,
    n: usize,
    orders: &[Vec<usize>],
    aggregation: ListAggregation,
) -> Result<RankingPrediction> {
    let first = orders
        .first()
        .ok_or_else(|| Error::InvalidArgument("no listwise orders to aggregate".into()))?;
    let positions: Vec<Vec<usize>> = orders.iter().map(|o| crate::task::positions_of(o)).collect();
    let mean: Vec<f64> = (0..n)
        .map(|i| positions.iter().map(|p| p[i] as f64).sum::<f64>() / orders.len() as f64)
        .collect();
    let first_pos = crate::task::positions_of(first);
    let mut order: Vec<usize> = (0..n).collect();
    match aggregation {
        ListAggregation::MeanRank => {
            order.sort_by(|&i, &j| mean[i].total_cmp(&mean[j]).then(first_pos[i].cmp(&first_pos[j])))
        }
        ListAggregation::Borda => order.sort_by(|&i, &j| mean[i].total_cmp(&mean[j]).then(i.cmp(&j))),
    }
    let mut pred = RankingPrediction::new(task_id, order)?;
    pred.flagged_ties = pred.order.windows(2).filter(|w| mean[w[0]] == mean[w[1]]).count();
    pred.item_scores = Some(mean.iter().map(|m| n as f64 - 1.0 - m).collect());
    Ok(pred)
}

// ---------------------------------------------------------------------------
// Mock language model

/// `+1` for the best gold item down to `−1` for the worst.
fn gold_signal(task: &RankingTask) -> Result<Vec<f64>> {
    let pos = task.gold_positions()?;
    let span = (task.len() - 1).max(1) as f64;
    Ok(pos.iter().map(|&p| 1.0 - 2.0 * p as f64 / span).collect())
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// The planted direction shared by every task generated with `seed`.
pub fn planted_direction(dim: usize, seed: u64) -> Vec<f64> {
    unit_vector(dim, &mut ChaCha8Rng::seed_from_u64(seed_from(&["direction", &seed.to_string()])))
}

fn noise_rng(kind: &str, task_id: &str, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed_from(&[kind, task_id, &seed.to_string()]))
}

/// `x_n = rank_n · u + ε` with `rank_n` the 1-based gold rank along `u`.
pub fn mock_embeddings_along(task: &RankingTask, u: &[f64], sigma: f64, seed: u64) -> Result<Vec<ActivationRecord>> {
    let pos = task.gold_positions()?;
    let normal = rand_distr::Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = noise_rng("single", &task.task_id, seed);
    Ok(pos
        .iter()
        .enumerate()
        .map(|(i, &p)| ActivationRecord {
            task_id: task.task_id.clone(),
            item_index: ItemRef::Single(i),
            prompt_variant: PromptVariant::Single,
            vector: u.iter().map(|ui| (p + 1) as f64 * ui + normal.sample(&mut rng)).collect(),
        })
        .collect())
}

pub fn mock_embeddings(task: &RankingTask, dim: usize, sigma: f64, seed: u64) -> Result<Vec<ActivationRecord>> {
    if dim == 0 {
        return Err(Error::InvalidArgument("mock embeddings need dim >= 1".into()));
    }
    mock_embeddings_along(task, &planted_direction(dim, seed), sigma, seed)
}

/// Contrast-pair activations for every ordered pair: the "Yes" and "No"
/// prompts sit in separate clusters and move along `±u` with the gold
/// rank difference.
pub fn mock_pair_embeddings(task: &RankingTask, dim: usize, sigma: f64, seed: u64) -> Result<Vec<ActivationRecord>> {
    if dim == 0 {
        return Err(Error::InvalidArgument("mock embeddings need dim >= 1".into()));
    }
    let pos = task.gold_positions()?;
    let u = planted_direction(dim, seed);
    let mut crng = ChaCha8Rng::seed_from_u64(seed_from(&["clusters", &seed.to_string()]));
    let c_yes: Vec<f64> = unit_vector(dim, &mut crng).into_iter().map(|x| 3.0 * x).collect();
    let c_no: Vec<f64> = unit_vector(dim, &mut crng).into_iter().map(|x| 3.0 * x).collect();
    let normal = rand_distr::Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = noise_rng("pair", &task.task_id, seed);
    let mut out = Vec::new();
    for p in pairs_for(task.len(), PairMode::Permutations) {
        let d = pos[p.b] as f64 - pos[p.a] as f64;
        for (variant, centre, sign) in [(PromptVariant::PairPos, &c_yes, 1.0), (PromptVariant::PairNeg, &c_no, -1.0)] {
            out.push(ActivationRecord {
                task_id: task.task_id.clone(),
                item_index: ItemRef::Pair([p.a, p.b]),
                prompt_variant: variant,
                vector: centre
                    .iter()
                    .zip(&u)
                    .map(|(c, ui)| c + sign * d * ui + normal.sample(&mut rng))
                    .collect(),
            });
        }
    }
    Ok(out)
}

/// Knobs of the mock language model's logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockLogitConfig {
    /// 1 = logits follow the gold order exactly, 0 = pure noise.
    pub fidelity: f64,
    /// Prior added to "Yes" (pair), "10" (single) or the first listed option (list).
    pub bias: f64,
    pub seed: u64,
}

impl Default for MockLogitConfig {
    fn default() -> Self {
        MockLogitConfig {
            fidelity: 1.0,
            bias: 0.0,
            seed: 0,
        }
    }
}

fn mixed(signal: f64, cfg: &MockLogitConfig, rng: &mut ChaCha8Rng) -> f64 {
    let g: f64 = rng.sample(StandardNormal);
    cfg.fidelity * signal + (1.0 - cfg.fidelity) * g
}

/// Logit records for the single or pair prompts of a task.
pub fn mock_logits(task: &RankingTask, variant: PromptVariant, cfg: &MockLogitConfig) -> Result<Vec<LogitRecord>> {
    let z = gold_signal(task)?;
    match variant {
        PromptVariant::Pair => {
            let mut rng = noise_rng("pair_logits", &task.task_id, cfg.seed);
            Ok(pairs_for(task.len(), PairMode::Permutations)
                .into_iter()
                .map(|p| {
                    let s = mixed(z[p.a] - z[p.b], cfg, &mut rng);
                    LogitRecord {
                        request_id: pair_request_id(&task.task_id, p),
                        task_id: task.task_id.clone(),
                        prompt_variant: PromptVariant::Pair,
                        candidate_logits: BTreeMap::from([
                            (YES.to_string(), 0.5 * s + cfg.bias),
                            (NO.to_string(), -0.5 * s),
                        ]),
                    }
                })
                .collect())
        }
        PromptVariant::Single => {
            let mut rng = noise_rng("single_logits", &task.task_id, cfg.seed);
            Ok((0..task.len())
                .map(|i| {
                    // scale value in [0, 10], noise widened to the scale
                    let v = 5.0 + 5.0 * mixed(z[i], cfg, &mut rng);
                    let logits = (0..=10)
                        .map(|c| {
                            let bias = if c == 10 { cfg.bias } else { 0.0 };
                            (c.to_string(), -(c as f64 - v).powi(2) / 2.0 + 0.1 * v + bias)
                        })
                        .collect();
                    LogitRecord {
                        request_id: single_request_id(&task.task_id, i),
                        task_id: task.task_id.clone(),
                        prompt_variant: PromptVariant::Single,
                        candidate_logits: logits,
                    }
                })
                .collect())
        }
        other => Err(Error::InvalidArgument(format!(
            "mock logits cover single and pair prompts, not {other:?}"
        ))),
    }
}

/// Listwise mock: option logits follow gold with noise; `bias` goes to the
/// option listed first among those remaining.
#[derive(Debug, Clone)]
pub struct MockListScorer<'a> {
    pub task: &'a RankingTask,
    pub cfg: MockLogitConfig,
    z: Vec<f64>,
}

impl<'a> MockListScorer<'a> {
    pub fn new(task: &'a RankingTask, cfg: MockLogitConfig) -> Result<Self> {
        Ok(MockListScorer {
            z: gold_signal(task)?,
            task,
            cfg,
        })
    }
}

impl StepScorer for MockListScorer<'_> {
    fn score(&mut self, request: &ListwiseRequest) -> Result<Option<LogitRecord>> {
        // recover the label -> item mapping from the prompt's option listing
        let mut rng = noise_rng("list_logits", &request.request_id, self.cfg.seed);
        let mut logits = BTreeMap::new();
        for (i, label) in request.candidates.iter().enumerate() {
            let item = listed_item(self.task, &request.prompt_text, label)?;
            let bias = if i == 0 { self.cfg.bias } else { 0.0 };
            logits.insert(label.clone(), 2.0 * mixed(self.z[item], &self.cfg, &mut rng) + bias);
        }
        Ok(Some(LogitRecord {
            request_id: request.request_id.clone(),
            task_id: request.task_id.clone(),
            prompt_variant: PromptVariant::List,
            candidate_logits: logits,
        }))
    }
}

fn listed_item(task: &RankingTask, prompt: &str, label: &str) -> Result<usize> {
    let marker = format!("\"{label}\" ");
    let start = prompt
        .find(&marker)
        .ok_or_else(|| Error::Validation(format!("option {label} not listed in prompt")))?
        + marker.len();
    let rest = &prompt[start..];
    // longest item text that the listing continues with
    task.items
        .iter()
        .enumerate()
        .filter(|(_, it)| {
            rest.strip_prefix(it.as_str())
                .is_some_and(|tail| tail.starts_with(", ") || tail.starts_with(". "))
        })
        .max_by_key(|(_, it)| it.len())
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Validation(format!("option {label} names no item of {}", task.task_id)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::evaluation::{kendall_tau, pairwise_accuracy, raw_pairwise_agreement};
    use crate::task::{generate_synthetic, SyntheticKind};

    fn rec(id: &str, logits: &[(&str, f64)]) -> LogitRecord {
        LogitRecord {
            request_id: id.into(),
            task_id: "t".into(),
            prompt_variant: PromptVariant::Pair,
            candidate_logits: logits.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    fn six() -> RankingTask {
        generate_synthetic(SyntheticKind::SynthFacts, 0).tasks[0].clone()
    }

    #[test]
    fn calibration_subtracts_means() {
        let r1 = rec("1", &[("Yes", 2.0), ("No", 1.0)]);
        let r2 = rec("2", &[("Yes", 4.0), ("No", 1.0)]);
        let p = |a, b| ItemPair { a, b };
        let c = calibrate_pairwise(&[(p(0, 1), &r1), (p(1, 0), &r2)]).unwrap();
        assert_eq!((c[0].yes_score, c[0].no_score), (-1.0, 0.0));
        assert_eq!((c[1].yes_score, c[1].no_score), (1.0, 0.0));

        let z1 = rec("1", &[("Yes", 1.0), ("No", -2.0)]);
        let z2 = rec("2", &[("Yes", -1.0), ("No", 2.0)]);
        let c = calibrate_pairwise(&[(p(0, 1), &z1), (p(1, 0), &z2)]).unwrap();
        assert_eq!((c[0].yes_score, c[0].no_score), (1.0, -2.0));

        let bad = rec("3", &[("Yes", 1.0)]);
        assert!(matches!(
            calibrate_pairwise(&[(p(0, 1), &bad)]),
            Err(Error::MissingCandidate { .. })
        ));
    }

    #[test]
    fn decide_pair_examples() {
        let p = ItemPair { a: 0, b: 1 };
        let o = decide_pair(&CalibratedPair { pair: p, yes_score: 1.0, no_score: 0.0 });
        assert_eq!((o.decision.winner, o.score, o.tied), (0, 1.0, false));
        let o = decide_pair(&CalibratedPair { pair: p, yes_score: -0.5, no_score: 0.2 });
        assert_eq!(o.decision.winner, 1);
        let o = decide_pair(&CalibratedPair { pair: p, yes_score: 0.3, no_score: 0.3 });
        assert_eq!((o.decision.winner, o.tied), (1, true));
    }

    fn scale_record(peak: u32, height: f64) -> LogitRecord {
        let logits: Vec<(String, f64)> = (0..=10u32)
            .map(|c| (c.to_string(), if c == peak { height } else { 0.0 }))
            .collect();
        LogitRecord {
            request_id: format!("p{peak}"),
            task_id: "t".into(),
            prompt_variant: PromptVariant::Single,
            candidate_logits: logits.into_iter().collect(),
        }
    }

    #[test]
    fn pointwise_examples() {
        let a = pointwise_score(&scale_record(7, 3.2)).unwrap();
        let b = pointwise_score(&scale_record(7, 2.1)).unwrap();
        assert_eq!((a.rank_value, b.rank_value), (7, 7));
        let r = pointwise_ranking("t", &[b, a]).unwrap();
        assert_eq!(r.order, [1, 0]);

        let hi = pointwise_score(&scale_record(9, 1.0)).unwrap();
        let lo = pointwise_score(&scale_record(4, 5.0)).unwrap();
        assert_eq!(pointwise_ranking("t", &[lo, hi]).unwrap().order, [1, 0]);

        let flat = pointwise_score(&scale_record(3, 0.0)).unwrap();
        assert_eq!((flat.rank_value, flat.tied), (0, true));

        let mut missing = scale_record(3, 1.0);
        missing.candidate_logits.remove("10");
        assert!(pointwise_score(&missing).is_err());
    }

    #[test]
    fn listwise_shuffle_invariant_model() {
        let task = RankingTask::new("t", "d", "size", None, vec!["A".into(), "B".into(), "C".into()], None).unwrap();
        let mut scorer = |req: &ListwiseRequest| -> Result<Option<LogitRecord>> {
            let logits = req
                .candidates
                .iter()
                .map(|l| {
                    let item = listed_item(&task, &req.prompt_text, l)?;
                    Ok((l.clone(), 10.0 - item as f64))
                })
                .collect::<Result<_>>()?;
            Ok(Some(LogitRecord {
                request_id: req.request_id.clone(),
                task_id: req.task_id.clone(),
                prompt_variant: PromptVariant::List,
                candidate_logits: logits,
            }))
        };
        for repeats in [1, 3, 5] {
            let out = listwise_decode(&task, repeats, 9, &mut scorer, ListAggregation::MeanRank).unwrap();
            let ListwiseOutcome::Done { prediction, .. } = out else { panic!() };
            assert_eq!(prediction.order, [0, 1, 2]);
        }
    }

    #[test]
    fn single_repeat_is_greedy_decode() {
        let task = six();
        let cfg = MockLogitConfig { fidelity: 0.3, bias: 0.0, seed: 4 };
        let mut scorer = MockListScorer::new(&task, cfg).unwrap();
        let ListwiseOutcome::Done { prediction, repeats, .. } =
            listwise_decode(&task, 1, 17, &mut scorer, ListAggregation::MeanRank).unwrap()
        else {
            panic!()
        };
        assert_eq!(prediction.order, repeats[0]);
    }

    #[test]
    fn positional_bias_mock_is_uninformative() {
        let mut taus = Vec::new();
        for t in 0..40 {
            let ds = crate::task::generate_planted("p", 1, 6, t).unwrap();
            let task = &ds.tasks[0];
            let cfg = MockLogitConfig { fidelity: 0.0, bias: 100.0, seed: t };
            let mut scorer = MockListScorer::new(task, cfg).unwrap();
            let ListwiseOutcome::Done { prediction, repeats, .. } =
                listwise_decode(task, 5, t * 100, &mut scorer, ListAggregation::MeanRank).unwrap()
            else {
                panic!()
            };
            for (r, order) in repeats.iter().enumerate() {
                let s = ListwiseSession::new(task, repeat_seed(t * 100, r)).unwrap();
                assert_eq!(order, &s.option_order);
            }
            taus.push(kendall_tau(&prediction.order, task.gold().unwrap()).unwrap());
        }
        let mean = taus.iter().sum::<f64>() / taus.len() as f64;
        assert!(mean.abs() < 0.2, "mean tau {mean}");
    }

    #[test]
    fn listwise_rejects_inconsistent_step() {
        let task = six();
        let mut scorer = |req: &ListwiseRequest| -> Result<Option<LogitRecord>> {
            Ok(Some(LogitRecord {
                request_id: req.request_id.clone(),
                task_id: req.task_id.clone(),
                prompt_variant: PromptVariant::List,
                candidate_logits: BTreeMap::from([("A".to_string(), 1.0)]),
            }))
        };
        assert!(listwise_decode(&task, 1, 0, &mut scorer, ListAggregation::MeanRank).is_err());
    }

    #[test]
    fn replay_reports_pending_requests() {
        let task = six();
        let mut replay = ReplayScorer::default();
        let ListwiseOutcome::Pending(reqs) =
            listwise_decode(&task, 2, 0, &mut replay, ListAggregation::MeanRank).unwrap()
        else {
            panic!()
        };
        assert_eq!(reqs.len(), 2);
        assert!(reqs.iter().all(|r| r.step == 0 && r.candidates.len() == 6));
    }

    #[test]
    fn mock_embedding_construction() {
        let task = RankingTask::new("t", "d", "c", None, vec!["x".into(), "y".into(), "z".into()], Some(vec![3.0, 2.0, 1.0])).unwrap();
        let recs = mock_embeddings_along(&task, &[1.0, 0.0, 0.0, 0.0], 0.0, 0).unwrap();
        let v: Vec<_> = recs.iter().map(|r| r.vector.clone()).collect();
        assert_eq!(v, [vec![1.0, 0.0, 0.0, 0.0], vec![2.0, 0.0, 0.0, 0.0], vec![3.0, 0.0, 0.0, 0.0]]);
        let u = planted_direction(16, 5);
        assert!((u.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        let mut nogold = task.clone();
        nogold.gold_ranking = None;
        assert!(mock_embeddings(&nogold, 4, 0.0, 0).is_err());
    }

    fn pair_inputs(task: &RankingTask, recs: &[LogitRecord]) -> Vec<(ItemPair, LogitRecord)> {
        pairs_for(task.len(), PairMode::Permutations).into_iter().zip(recs.iter().cloned()).collect()
    }

    #[test]
    fn mock_pair_logits_and_calibration() {
        let task = six();
        let gold = task.gold().unwrap().to_vec();
        let clean = mock_logits(&task, PromptVariant::Pair, &MockLogitConfig::default()).unwrap();
        let inputs = pair_inputs(&task, &clean);
        let refs: Vec<_> = inputs.iter().map(|(p, r)| (*p, r)).collect();
        let dec: Vec<_> = raw_pairs(&refs).unwrap().iter().map(|c| decide_pair(c).decision).collect();
        assert_eq!(raw_pairwise_agreement(&dec, &gold).unwrap(), 1.0);

        let biased = mock_logits(&task, PromptVariant::Pair, &MockLogitConfig { bias: 5.0, ..Default::default() }).unwrap();
        let inputs = pair_inputs(&task, &biased);
        let refs: Vec<_> = inputs.iter().map(|(p, r)| (*p, r)).collect();
        let raw: Vec<_> = raw_pairs(&refs).unwrap().iter().map(|c| decide_pair(c).decision).collect();
        assert!(raw.iter().all(|d| d.winner == d.a));
        assert!(raw_pairwise_agreement(&raw, &gold).unwrap() <= 0.5);
        let cal: Vec<_> = calibrate_pairwise(&refs).unwrap().iter().map(|c| decide_pair(c).decision).collect();
        assert_eq!(pairwise_accuracy(&cal, &gold).unwrap(), 1.0);
        assert_eq!(raw_pairwise_agreement(&cal, &gold).unwrap(), 1.0);
    }

    #[test]
    fn mock_single_logits_rank_correctly() {
        let task = six();
        let recs = mock_logits(&task, PromptVariant::Single, &MockLogitConfig::default()).unwrap();
        let scores: Vec<_> = recs.iter().map(|r| pointwise_score(r).unwrap()).collect();
        let pred = pointwise_ranking(&task.task_id, &scores).unwrap();
        assert_eq!(kendall_tau(&pred.order, task.gold().unwrap()).unwrap(), 1.0);
    }

    #[test]
    fn plans_and_templates() {
        let task = six();
        assert_eq!(plan_single(&task).len(), 6);
        let pairs = plan_pairs(&task);
        assert_eq!(pairs.len(), 30);
        let ids: BTreeSet<_> = pairs.iter().map(|r| r.request_id.clone()).collect();
        assert_eq!(ids.len(), 30);
        assert_eq!(
            render_single(&task, 0),
            "On a scale from 0 to 10, the sentiment of the adjective of horrible is [MASK]"
        );
        assert_eq!(
            render_pair(&task, ItemPair { a: 0, b: 1 }),
            "Is horrible more in terms of sentiment of the adjective than bad? [MASK]"
        );
        let text = render_list(&task, &[2, 0], &["B".into()]).unwrap();
        assert_eq!(
            text,
            "Order by sentiment of the adjective. Options: \"A\" okay, \"B\" horrible. The correct ordering is: \"B\""
        );
        assert_eq!(listed_item(&task, &text, "A").unwrap(), 2);
        assert_eq!(stable_id(&["a", "b"]), stable_id(&["a", "b"]));
        assert_ne!(stable_id(&["a", "b"]), stable_id(&["ab"]));
    }

    #[test]
    fn borda_and_mean_rank_agree_without_ties() {
        let orders = vec![vec![0, 1, 2, 3], vec![1, 0, 2, 3], vec![0, 2, 1, 3]];
        let m = aggregate_orders("t", 4, &orders, ListAggregation::MeanRank).unwrap();
        let b = aggregate_orders("t", 4, &orders, ListAggregation::Borda).unwrap();
        assert_eq!(m.order, b.order);
        assert_eq!(m.order, [0, 1, 2, 3]);
        let tied = vec![vec![1, 0], vec![0, 1]];
        assert_eq!(aggregate_orders("t", 2, &tied, ListAggregation::MeanRank).unwrap().order, [1, 0]);
        assert_eq!(aggregate_orders("t", 2, &tied, ListAggregation::Borda).unwrap().order, [0, 1]);
    }

    proptest! {
        #[test]
        fn calibration_ignores_a_constant_token_shift(
            logits in prop::collection::vec((-40i32..40, -40i32..40), 30),
            shift in -20i32..20,
            shift_yes in any::<bool>(),
        ) {
            let task = six();
            let pairs = pairs_for(task.len(), PairMode::Permutations);
            let build = |c: f64| -> Vec<LogitRecord> {
                pairs
                    .iter()
                    .zip(&logits)
                    .map(|(p, &(y, n))| {
                        let (mut y, mut n) = (f64::from(y) / 4.0, f64::from(n) / 4.0);
                        if shift_yes { y += c } else { n += c }
                        rec(&pair_request_id(&task.task_id, *p), &[(YES, y), (NO, n)])
                    })
                    .collect()
            };
            let base = build(0.0);
            let moved = build(f64::from(shift));
            let keyed = |rs: &[LogitRecord]| -> Vec<PairOutcome> {
                let refs: Vec<(ItemPair, &LogitRecord)> = pairs.iter().copied().zip(rs).collect();
                calibrate_pairwise(&refs).unwrap().iter().map(decide_pair).collect()
            };
            for (a, b) in keyed(&base).iter().zip(keyed(&moved).iter()) {
                prop_assume!(a.score.abs() > 1e-9);
                prop_assert_eq!(a.decision.winner, b.decision.winner);
            }
        }

        #[test]
        fn listwise_output_is_a_permutation(
            fidelity in 0.0f64..=1.0, bias in -3.0f64..3.0, seed in any::<u64>(), repeats in 1usize..4,
            borda in any::<bool>(),
        ) {
            let task = six();
            let mut scorer = MockListScorer::new(&task, MockLogitConfig { fidelity, bias, seed }).unwrap();
            let agg = if borda { ListAggregation::Borda } else { ListAggregation::MeanRank };
            let ListwiseOutcome::Done { prediction, repeats: orders, .. } =
                listwise_decode(&task, repeats, seed, &mut scorer, agg).unwrap()
            else {
                panic!("mock scorer answers every step");
            };
            let mut order = prediction.order.clone();
            order.sort_unstable();
            prop_assert_eq!(order, (0..task.len()).collect::<Vec<_>>());
            prop_assert_eq!(orders.len(), repeats);
        }

        #[test]
        fn pointwise_order_is_total(values in prop::collection::vec(prop::collection::vec(-3i32..3, 11), 4..9)) {
            let scores: Vec<PointScore> = values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let logits: Vec<(String, f64)> =
                        v.iter().enumerate().map(|(c, &x)| (c.to_string(), f64::from(x))).collect();
                    let r = LogitRecord {
                        request_id: i.to_string(),
                        task_id: "t".into(),
                        prompt_variant: PromptVariant::Single,
                        candidate_logits: logits.into_iter().collect(),
                    };
                    pointwise_score(&r).unwrap()
                })
                .collect();
            let pred = pointwise_ranking("t", &scores).unwrap();
            let mut order = pred.order.clone();
            order.sort_unstable();
            prop_assert_eq!(order, (0..values.len()).collect::<Vec<_>>());
            for w in pred.order.windows(2) {
                prop_assert!(scores[w[0]].rank_value >= scores[w[1]].rank_value);
            }
            prop_assert_eq!(pointwise_ranking("t", &scores).unwrap(), pred);
        }
    }
}
