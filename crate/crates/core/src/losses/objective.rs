//! Losses evaluated on activation batches, with gradients over the flat
//! probe parameter vector (see [`ProbeShape::to_probe`] for the layout).

use serde::{Deserialize, Serialize};

use super::{
    margin_ccr, ordreg_ccr, orig_ccs, supervised_ceiling, triplet_ccr, CeilingInput, GoldLabel, LossConfig,
    LossValue, MatrixLoss, ScoreLoss, SupervisedKind,
};
use crate::error::{Error, Result};
use crate::probe::{coral_biases_with_grad, sigmoid, softplus, ProbeShape};
use crate::task::{pairs_for, triples_for, ItemPair, PairMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    /// origCCS on contrast prompt pairs ("… ? Yes" / "… ? No").
    OrigCcsPair,
    /// origCCS with the two items' single-prompt scores plugged in.
    OrigCcsSingle,
    MarginCcr,
    TripletCcr,
    OrdRegCcr,
    SupBcePair,
    SupBceSingle,
    SupMaxMargin,
    SupTriplet,
    SupCoral,
}

impl LossKind {
    pub const ALL: [LossKind; 10] = [
        LossKind::OrigCcsPair,
        LossKind::OrigCcsSingle,
        LossKind::MarginCcr,
        LossKind::TripletCcr,
        LossKind::OrdRegCcr,
        LossKind::SupBcePair,
        LossKind::SupBceSingle,
        LossKind::SupMaxMargin,
        LossKind::SupTriplet,
        LossKind::SupCoral,
    ];

    pub fn is_supervised(self) -> bool {
        matches!(
            self,
            LossKind::SupBcePair
                | LossKind::SupBceSingle
                | LossKind::SupMaxMargin
                | LossKind::SupTriplet
                | LossKind::SupCoral
        )
    }

    pub fn uses_contrast_pairs(self) -> bool {
        matches!(self, LossKind::OrigCcsPair | LossKind::SupBcePair)
    }

    pub fn shape(self, dim: usize) -> ProbeShape {
        match self {
            LossKind::OrdRegCcr | LossKind::SupCoral => ProbeShape::Coral { dim },
            _ => ProbeShape::Linear { dim },
        }
    }

    /// The supervised objective that bounds this unsupervised one.
    pub fn ceiling(self) -> Option<LossKind> {
        match self {
            LossKind::OrigCcsPair => Some(LossKind::SupBcePair),
            LossKind::OrigCcsSingle => Some(LossKind::SupBceSingle),
            LossKind::MarginCcr => Some(LossKind::SupMaxMargin),
            LossKind::TripletCcr => Some(LossKind::SupTriplet),
            LossKind::OrdRegCcr => Some(LossKind::SupCoral),
            _ => None,
        }
    }

    /// Loss datapoints for one task. Symmetric pair losses use combinations,
    /// the origCCS/BCE family uses permutations.
    pub fn datapoints(self, task: usize, batch: &TaskBatch) -> Vec<Datapoint> {
        self.datapoints_with(task, batch, None)
    }

    /// As [`LossKind::datapoints`], optionally forcing the pair enumeration of
    /// single-prompt pair losses.
    pub fn datapoints_with(self, task: usize, batch: &TaskBatch, pair_mode: Option<PairMode>) -> Vec<Datapoint> {
        let n = batch.n_items;
        let pairs = |default: PairMode| {
            let mode = pair_mode.unwrap_or(default);
            pairs_for(n, mode)
                .into_iter()
                .map(|p| Datapoint::Pair { task, pair: p })
                .collect()
        };
        match self {
            LossKind::OrigCcsPair | LossKind::SupBcePair => match &batch.inputs {
                TaskInputs::Contrast { pairs, .. } => {
                    (0..pairs.len()).map(|index| Datapoint::Contrast { task, index }).collect()
                }
                TaskInputs::Items(_) => Vec::new(),
            },
            LossKind::OrigCcsSingle | LossKind::SupBceSingle => pairs(PairMode::Permutations),
            LossKind::MarginCcr | LossKind::SupMaxMargin => pairs(PairMode::Combinations),
            LossKind::TripletCcr | LossKind::SupTriplet => triples_for(n)
                .into_iter()
                .map(|t| Datapoint::Triple {
                    task,
                    anchor: t.anchor,
                    a: t.a,
                    b: t.b,
                })
                .collect(),
            LossKind::OrdRegCcr | LossKind::SupCoral => vec![Datapoint::Matrix { task }],
        }
    }

    fn supervised_kind(self) -> Option<SupervisedKind> {
        match self {
            LossKind::SupBcePair | LossKind::SupBceSingle => Some(SupervisedKind::BcePairwise),
            LossKind::SupMaxMargin => Some(SupervisedKind::MaxMargin),
            LossKind::SupTriplet => Some(SupervisedKind::Triplet),
            LossKind::SupCoral => Some(SupervisedKind::CoralOrdinal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskInputs {
    /// One (normalized) vector per item.
    Items(Vec<Vec<f64>>),
    /// Per ordered pair, the positive and negative prompt vectors.
    Contrast {
        pairs: Vec<ItemPair>,
        pos: Vec<Vec<f64>>,
        neg: Vec<Vec<f64>>,
    },
}

/// All activations of one ranking task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub task_id: String,
    pub n_items: usize,
    pub inputs: TaskInputs,
    /// Gold place of each item, 0 = best. Required by supervised losses only.
    pub gold_positions: Option<Vec<usize>>,
}

impl TaskBatch {
    pub fn items(task_id: impl Into<String>, vectors: Vec<Vec<f64>>, gold_positions: Option<Vec<usize>>) -> Self {
        TaskBatch {
            task_id: task_id.into(),
            n_items: vectors.len(),
            inputs: TaskInputs::Items(vectors),
            gold_positions,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.inputs {
            TaskInputs::Items(v) => v.first().map_or(0, Vec::len),
            TaskInputs::Contrast { pos, .. } => pos.first().map_or(0, Vec::len),
        }
    }

    fn item(&self, i: usize) -> Result<&[f64]> {
        match &self.inputs {
            TaskInputs::Items(v) => v.get(i).map(Vec::as_slice).ok_or_else(|| {
                Error::InvalidArgument(format!("item {i} out of range in task {}", self.task_id))
            }),
            TaskInputs::Contrast { .. } => Err(Error::InvalidArgument(format!(
                "task {} carries contrast pairs, not item vectors",
                self.task_id
            ))),
        }
    }

    fn gold(&self) -> Option<&[usize]> {
        self.gold_positions.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Datapoint {
    Contrast { task: usize, index: usize },
    Pair { task: usize, pair: ItemPair },
    Triple { task: usize, anchor: usize, a: usize, b: usize },
    Matrix { task: usize },
}

impl Datapoint {
    pub fn task(&self) -> usize {
        match *self {
            Datapoint::Contrast { task, .. }
            | Datapoint::Pair { task, .. }
            | Datapoint::Triple { task, .. }
            | Datapoint::Matrix { task } => task,
        }
    }
}

/// Scores of a linear probe on a few vectors, remembering what is needed to
/// chain score gradients back to `[θ, b]`.
struct LinearEval<'a> {
    params: &'a [f64],
    dim: usize,
    grad: Vec<f64>,
}

impl<'a> LinearEval<'a> {
    fn new(params: &'a [f64], dim: usize) -> Self {
        LinearEval {
            params,
            dim,
            grad: vec![0.0; dim + 1],
        }
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                context: "loss input".into(),
                expected: self.dim,
                got: x.len(),
            });
        }
        let z: f64 = self.params[..self.dim].iter().zip(x).map(|(t, v)| t * v).sum::<f64>() + self.params[self.dim];
        Ok(sigmoid(z))
    }

    fn backprop(&mut self, x: &[f64], s: f64, d_score: f64) {
        let g = d_score * s * (1.0 - s);
        for (acc, v) in self.grad[..self.dim].iter_mut().zip(x) {
            *acc += g * v;
        }
        self.grad[self.dim] += g;
    }

    fn finish(self, loss: &ScoreLoss) -> LossValue {
        LossValue {
            total: loss.total,
            consistency: loss.consistency,
            confidence: loss.confidence,
            gradient: self.grad,
        }
    }
}

fn linear_loss(
    params: &[f64],
    dim: usize,
    xs: &[&[f64]],
    f: impl FnOnce(&[f64]) -> Result<ScoreLoss>,
) -> Result<LossValue> {
    let mut ev = LinearEval::new(params, dim);
    let scores = xs.iter().map(|x| ev.score(x)).collect::<Result<Vec<_>>>()?;
    let loss = f(&scores)?;
    for ((x, s), d) in xs.iter().zip(&scores).zip(&loss.d_scores) {
        ev.backprop(x, *s, *d);
    }
    Ok(ev.finish(&loss))
}

fn as_score_loss(m: MatrixLoss) -> ScoreLoss {
    ScoreLoss {
        total: m.total,
        consistency: m.consistency,
        confidence: m.confidence,
        d_scores: m.d_matrix.into_iter().next().unwrap_or_default(),
    }
}

/// CORAL score matrix of a task plus everything needed for backprop.
fn coral_loss(
    params: &[f64],
    dim: usize,
    vectors: &[Vec<f64>],
    f: impl FnOnce(&[Vec<f64>]) -> Result<MatrixLoss>,
) -> Result<LossValue> {
    let k = vectors.len();
    let raw_a = params[dim];
    let raw_b = params[dim + 1];
    let bias = coral_biases_with_grad(softplus(raw_a), softplus(raw_b), k)?;
    let logits = vectors
        .iter()
        .map(|x| {
            if x.len() != dim {
                return Err(Error::Dimension {
                    context: "loss input".into(),
                    expected: dim,
                    got: x.len(),
                });
            }
            Ok(params[..dim].iter().zip(x).map(|(t, v)| t * v).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    let matrix: Vec<Vec<f64>> = logits
        .iter()
        .map(|z| bias.biases.iter().map(|b| sigmoid(z + b)).collect())
        .collect();
    let loss = f(&matrix)?;

    let mut grad = vec![0.0; dim + 2];
    let mut d_bias = vec![0.0; k];
    for ((x, row), drow) in vectors.iter().zip(&matrix).zip(&loss.d_matrix) {
        let mut dz = 0.0;
        for ((s, g), db) in row.iter().zip(drow).zip(d_bias.iter_mut()) {
            let local = g * s * (1.0 - s);
            dz += local;
            *db += local;
        }
        for (acc, v) in grad[..dim].iter_mut().zip(x) {
            *acc += dz * v;
        }
    }
    let d_alpha: f64 = d_bias.iter().zip(&bias.d_alpha).map(|(a, b)| a * b).sum();
    let d_beta: f64 = d_bias.iter().zip(&bias.d_beta).map(|(a, b)| a * b).sum();
    // d softplus(r) / dr = sigmoid(r)
    grad[dim] = d_alpha * sigmoid(raw_a);
    grad[dim + 1] = d_beta * sigmoid(raw_b);
    Ok(LossValue {
        total: loss.total,
        consistency: loss.consistency,
        confidence: loss.confidence,
        gradient: grad,
    })
}

fn first_higher(gold: Option<&[usize]>, a: usize, b: usize) -> Option<GoldLabel<'static>> {
    gold.map(|g| GoldLabel::FirstHigher(g[a] < g[b]))
}

/// Loss and parameter gradient of a single datapoint.
pub fn evaluate(
    kind: LossKind,
    params: &[f64],
    batches: &[TaskBatch],
    point: Datapoint,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let batch = batches
        .get(point.task())
        .ok_or_else(|| Error::InvalidArgument(format!("datapoint refers to missing task {}", point.task())))?;
    let dim = batch.dim();
    let shape = kind.shape(dim);
    if params.len() != shape.n_params() {
        return Err(Error::Dimension {
            context: format!("{kind:?} parameters"),
            expected: shape.n_params(),
            got: params.len(),
        });
    }
    let sup = kind.supervised_kind();
    let gold = batch.gold();
    if sup.is_some() && gold.is_none() {
        return Err(Error::MissingGold(batch.task_id.clone()));
    }

    match point {
        Datapoint::Contrast { index, .. } => {
            let TaskInputs::Contrast { pairs, pos, neg } = &batch.inputs else {
                return Err(Error::InvalidArgument(format!("{kind:?} needs contrast pairs")));
            };
            let (xp, xn) = (&pos[index], &neg[index]);
            let pair = pairs[index];
            linear_loss(params, dim, &[xp, xn], |s| match sup {
                None => Ok(orig_ccs(s[0], s[1], cfg)),
                Some(k) => supervised_ceiling(
                    k,
                    CeilingInput::Pair {
                        s_pos: s[0],
                        s_neg: s[1],
                    },
                    first_higher(gold, pair.a, pair.b),
                    cfg,
                )
                .map(as_score_loss),
            })
        }
        Datapoint::Pair { pair, .. } => {
            let (xa, xb) = (batch.item(pair.a)?, batch.item(pair.b)?);
            linear_loss(params, dim, &[xa, xb], |s| match kind {
                LossKind::OrigCcsSingle => Ok(orig_ccs(s[0], s[1], cfg)),
                LossKind::MarginCcr => Ok(margin_ccr(s[0], s[1], cfg)),
                LossKind::SupBceSingle | LossKind::SupMaxMargin => supervised_ceiling(
                    sup.expect("supervised"),
                    CeilingInput::Pair {
                        s_pos: s[0],
                        s_neg: s[1],
                    },
                    first_higher(gold, pair.a, pair.b),
                    cfg,
                )
                .map(as_score_loss),
                other => Err(Error::InvalidArgument(format!("{other:?} does not take item pairs"))),
            })
        }
        Datapoint::Triple { anchor, a, b, .. } => {
            let xs = [batch.item(anchor)?, batch.item(a)?, batch.item(b)?];
            linear_loss(params, dim, &xs, |s| match kind {
                LossKind::TripletCcr => Ok(triplet_ccr(s[0], s[1], s[2], cfg)),
                LossKind::SupTriplet => {
                    let g = gold.expect("checked above");
                    let da = g[anchor].abs_diff(g[a]);
                    let db = g[anchor].abs_diff(g[b]);
                    let label = GoldLabel::PositiveIsA((da != db).then_some(da < db));
                    supervised_ceiling(
                        SupervisedKind::Triplet,
                        CeilingInput::Triple {
                            s_anchor: s[0],
                            s_a: s[1],
                            s_b: s[2],
                        },
                        Some(label),
                        cfg,
                    )
                    .map(as_score_loss)
                }
                other => Err(Error::InvalidArgument(format!("{other:?} does not take triples"))),
            })
        }
        Datapoint::Matrix { .. } => {
            let TaskInputs::Items(vectors) = &batch.inputs else {
                return Err(Error::InvalidArgument(format!("{kind:?} needs item vectors")));
            };
            coral_loss(params, dim, vectors, |m| match kind {
                LossKind::OrdRegCcr => ordreg_ccr(m, cfg),
                LossKind::SupCoral => {
                    let k = m.len();
                    let ranks: Vec<usize> = gold.expect("checked above").iter().map(|p| k - p).collect();
                    supervised_ceiling(
                        SupervisedKind::CoralOrdinal,
                        CeilingInput::Matrix(m),
                        Some(GoldLabel::Ranks(&ranks)),
                        cfg,
                    )
                }
                other => Err(Error::InvalidArgument(format!("{other:?} does not take score matrices"))),
            })
        }
    }
}

/// Arithmetic mean of the loss (and gradient) over every datapoint of every task.
pub fn evaluate_mean(kind: LossKind, params: &[f64], batches: &[TaskBatch], cfg: &LossConfig) -> Result<LossValue> {
    let mut acc = LossValue {
        total: 0.0,
        consistency: 0.0,
        confidence: 0.0,
        gradient: vec![0.0; params.len()],
    };
    let mut count = 0usize;
    for (t, batch) in batches.iter().enumerate() {
        for point in kind.datapoints(t, batch) {
            let v = evaluate(kind, params, batches, point, cfg)?;
            acc.total += v.total;
            acc.consistency += v.consistency;
            acc.confidence += v.confidence;
            acc.gradient.iter_mut().zip(&v.gradient).for_each(|(a, g)| *a += g);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(format!("{kind:?} has no datapoints in this batch")));
    }
    let n = count as f64;
    acc.total /= n;
    acc.consistency /= n;
    acc.confidence /= n;
    acc.gradient.iter_mut().for_each(|g| *g /= n);
    Ok(acc)
}
