//! Direction-invariant ranking metrics and pairwise/listwise conversions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::positions_of;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingPrediction {
    pub task_id: String,
    /// Item indices, first = ranked highest.
    pub order: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_scores: Option<Vec<f64>>,
    /// Exact ties that had to be resolved by item index.
    #[serde(default)]
    pub flagged_ties: usize,
}

fn check_permutation(order: &[usize]) -> Result<()> {
    let mut seen = vec![false; order.len()];
    for &i in order {
        if i >= order.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Validation(format!("{order:?} is not a permutation")));
        }
    }
    Ok(())
}

impl RankingPrediction {
    pub fn new(task_id: impl Into<String>, order: Vec<usize>) -> Result<Self> {
        check_permutation(&order)?;
        Ok(RankingPrediction {
            task_id: task_id.into(),
            order,
            item_scores: None,
            flagged_ties: 0,
        })
    }

    /// Orders items by descending score; equal scores fall back to index.
    pub fn from_scores(task_id: impl Into<String>, scores: Vec<f64>) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
        let flagged_ties = order.windows(2).filter(|w| scores[w[0]] == scores[w[1]]).count();
        RankingPrediction {
            task_id: task_id.into(),
            order,
            item_scores: Some(scores),
            flagged_ties,
        }
    }

    pub fn reversed(&self) -> Self {
        let mut r = self.clone();
        r.order.reverse();
        r
    }
}

/// Kendall's tau between two strict orderings of the same items, counting
/// concordant and discordant item pairs directly.
pub fn kendall_tau(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Dimension {
            context: "kendall tau".into(),
            expected: gold.len(),
            got: pred.len(),
        });
    }
    if pred.len() < 2 {
        return Err(Error::InvalidArgument("kendall tau needs at least 2 items".into()));
    }
    check_permutation(pred)?;
    check_permutation(gold)?;
    let pp = positions_of(pred);
    let gp = positions_of(gold);
    let n = pred.len();
    let mut balance: i64 = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            let same = (pp[i] < pp[j]) == (gp[i] < gp[j]);
            balance += if same { 1 } else { -1 };
        }
    }
    Ok(balance as f64 / (n * (n - 1) / 2) as f64)
}

/// `|τ|`: a ranking and its reverse score the same.
pub fn tau_abs(pred: &[usize], gold: &[usize]) -> Result<f64> {
    kendall_tau(pred, gold).map(f64::abs)
}

/// Outcome of comparing items `a` and `b`, with the score each item
/// received in that comparison (e.g. calibrated "Yes" and "No" logits).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDecision {
    pub a: usize,
    pub b: usize,
    pub winner: usize,
    pub a_score: f64,
    pub b_score: f64,
}

impl PairDecision {
    /// Evidence in favour of `a`.
    pub fn margin(&self) -> f64 {
        self.a_score - self.b_score
    }
}

fn count_correct(decisions: &[PairDecision], gold: &[usize]) -> Result<usize> {
    if decisions.is_empty() {
        return Err(Error::InvalidArgument("no pairwise decisions to score".into()));
    }
    let pos = positions_of(gold);
    let mut correct = 0;
    for d in decisions {
        if d.a >= pos.len() || d.b >= pos.len() || d.a == d.b {
            return Err(Error::Validation(format!(
                "pair ({}, {}) has no gold label for {} items",
                d.a,
                d.b,
                pos.len()
            )));
        }
        let better = if pos[d.a] < pos[d.b] { d.a } else { d.b };
        correct += usize::from(d.winner == better);
    }
    Ok(correct)
}

/// Fraction of decisions agreeing with the gold ordering, before any reversal.
pub fn raw_pairwise_agreement(decisions: &[PairDecision], gold: &[usize]) -> Result<f64> {
    Ok(count_correct(decisions, gold)? as f64 / decisions.len() as f64)
}

/// `max(acc, 1 − acc)`: the whole prediction is reversed when that helps.
pub fn pairwise_accuracy(decisions: &[PairDecision], gold: &[usize]) -> Result<f64> {
    let raw = raw_pairwise_agreement(decisions, gold)?;
    Ok(raw.max(1.0 - raw))
}

/// Copeland-style win counts: one point per won comparison.
pub fn win_counts(n: usize, decisions: &[PairDecision]) -> Vec<usize> {
    let mut wins = vec![0; n];
    for d in decisions {
        if d.winner < n {
            wins[d.winner] += 1;
        }
    }
    wins
}

/// Ranks items by wins, then by the sum of their scores over all
/// comparisons, then by index (counted in `flagged_ties`).
pub fn pairs_to_ranking(task_id: impl Into<String>, n: usize, decisions: &[PairDecision]) -> Result<RankingPrediction> {
    let mut covered = vec![vec![false; n]; n];
    for d in decisions {
        if d.a >= n || d.b >= n || d.a == d.b || (d.winner != d.a && d.winner != d.b) {
            return Err(Error::Validation(format!("malformed decision {d:?} for {n} items")));
        }
        covered[d.a][d.b] = true;
        covered[d.b][d.a] = true;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if !covered[i][j] {
                return Err(Error::Validation(format!("pair ({i}, {j}) was never compared")));
            }
        }
    }
    let wins = win_counts(n, decisions);
    let mut evidence = vec![0.0; n];
    for d in decisions {
        evidence[d.a] += d.a_score;
        evidence[d.b] += d.b_score;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        wins[j]
            .cmp(&wins[i])
            .then(evidence[j].total_cmp(&evidence[i]))
            .then(i.cmp(&j))
    });
    let flagged_ties = order
        .windows(2)
        .filter(|w| wins[w[0]] == wins[w[1]] && evidence[w[0]] == evidence[w[1]])
        .count();
    Ok(RankingPrediction {
        task_id: task_id.into(),
        order,
        item_scores: Some(wins.iter().map(|&w| w as f64).collect()),
        flagged_ties,
    })
}

/// One decision per unordered pair `(a < b)`; the higher-ranked item wins.
pub fn ranking_to_pairs(pred: &RankingPrediction) -> Vec<PairDecision> {
    let pos = positions_of(&pred.order);
    let n = pred.order.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in (a + 1)..n {
            let a_wins = pos[a] < pos[b];
            let (a_score, b_score) = match &pred.item_scores {
                Some(s) => (s[a], s[b]),
                None => ((n - pos[a]) as f64, (n - pos[b]) as f64),
            };
            out.push(PairDecision {
                a,
                b,
                winner: if a_wins { a } else { b },
                a_score,
                b_score,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: String,
    pub tau: f64,
    pub tau_abs: f64,
    pub pairwise_accuracy: f64,
    pub flagged_ties: usize,
}

impl TaskMetrics {
    pub fn compute(pred: &RankingPrediction, decisions: &[PairDecision], gold: &[usize]) -> Result<Self> {
        let tau = kendall_tau(&pred.order, gold)?;
        Ok(TaskMetrics {
            task_id: pred.task_id.clone(),
            tau,
            tau_abs: tau.abs(),
            pairwise_accuracy: pairwise_accuracy(decisions, gold)?,
            flagged_ties: pred.flagged_ties,
        })
    }
}

/// Metrics of one run, averaged over its tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub tau_abs: f64,
    pub pairwise_accuracy: f64,
    pub per_task: Vec<TaskMetrics>,
}

impl RunMetrics {
    pub fn from_tasks(per_task: Vec<TaskMetrics>) -> Result<Self> {
        if per_task.is_empty() {
            return Err(Error::InvalidArgument("no tasks to average".into()));
        }
        let n = per_task.len() as f64;
        Ok(RunMetrics {
            tau_abs: per_task.iter().map(|t| t.tau_abs).sum::<f64>() / n,
            pairwise_accuracy: per_task.iter().map(|t| t.pairwise_accuracy).sum::<f64>() / n,
            per_task,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tau_abs: MeanStd,
    pub pairwise_accuracy: MeanStd,
    pub runs: Vec<RunMetrics>,
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<MetricReport> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to aggregate".into()));
    }
    let taus: Vec<f64> = runs.iter().map(|r| r.tau_abs).collect();
    let accs: Vec<f64> = runs.iter().map(|r| r.pairwise_accuracy).collect();
    Ok(MetricReport {
        tau_abs: MeanStd::of(&taus),
        pairwise_accuracy: MeanStd::of(&accs),
        runs: runs.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use proptest::sample::subsequence;

    fn dec(a: usize, b: usize, winner: usize, score: f64) -> PairDecision {
        PairDecision {
            a,
            b,
            winner,
            a_score: score,
            b_score: -score,
        }
    }

    #[test]
    fn tau_examples() {
        assert_eq!(kendall_tau(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[3, 2, 1, 0], &[0, 1, 2, 3]).unwrap(), -1.0);
        assert_eq!(tau_abs(&[3, 2, 1, 0], &[0, 1, 2, 3]).unwrap(), 1.0);
        let t = kendall_tau(&[0, 1, 3, 2], &[0, 1, 2, 3]).unwrap();
        assert!((t - 2.0 / 3.0).abs() < 1e-15);
        assert!(kendall_tau(&[0, 1], &[0, 1, 2]).is_err());
        assert!(kendall_tau(&[0, 0, 1], &[0, 1, 2]).is_err());
    }

    #[test]
    fn accuracy_reversal() {
        let gold = [0, 1, 2];
        let all_wrong = [dec(0, 1, 1, -1.0), dec(0, 2, 2, -1.0), dec(1, 2, 2, -1.0)];
        assert_eq!(pairwise_accuracy(&all_wrong, &gold).unwrap(), 1.0);
        let half = [dec(0, 1, 0, 1.0), dec(0, 2, 2, -1.0)];
        assert_eq!(pairwise_accuracy(&half, &gold).unwrap(), 0.5);

        let gold4 = [0, 1, 2, 3];
        let two_of_six = [
            dec(0, 1, 0, 1.0),
            dec(0, 2, 0, 1.0),
            dec(0, 3, 3, -1.0),
            dec(1, 2, 2, -1.0),
            dec(1, 3, 3, -1.0),
            dec(2, 3, 3, -1.0),
        ];
        assert!((pairwise_accuracy(&two_of_six, &gold4).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!(pairwise_accuracy(&[dec(0, 7, 0, 1.0)], &gold).is_err());
    }

    #[test]
    fn pairs_to_ranking_examples() {
        let transitive = [dec(0, 1, 0, 1.0), dec(0, 2, 0, 1.0), dec(1, 2, 1, 1.0)];
        assert_eq!(pairs_to_ranking("t", 3, &transitive).unwrap().order, [0, 1, 2]);
        assert!(pairs_to_ranking("t", 3, &transitive[..2]).is_err());
    }

    #[test]
    fn cycle_broken_by_score_sums() {
        // A>B, B>C, C>A: one win each; score sums A 2.5, B 1.0, C 0.5
        let d = |a, b, winner, a_score, b_score| PairDecision {
            a,
            b,
            winner,
            a_score,
            b_score,
        };
        let cycle = [d(0, 1, 0, 1.5, 0.25), d(1, 2, 1, 0.75, 0.25), d(2, 0, 2, 0.25, 1.0)];
        let r = pairs_to_ranking("t", 3, &cycle).unwrap();
        assert_eq!(r.order, [0, 1, 2]);
        assert_eq!(r.flagged_ties, 0);

        let symmetric = [d(0, 1, 0, 1.0, 0.0), d(1, 2, 1, 1.0, 0.0), d(2, 0, 2, 1.0, 0.0)];
        let r = pairs_to_ranking("t", 3, &symmetric).unwrap();
        assert_eq!(r.order, [0, 1, 2]);
        assert_eq!(r.flagged_ties, 2);
    }

    #[test]
    fn ranking_to_pairs_small() {
        let p = RankingPrediction::new("t", vec![2, 0, 1]).unwrap();
        let pairs = ranking_to_pairs(&p);
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs.iter().find(|d| d.a == 0 && d.b == 2).unwrap().winner, 2);
        assert_eq!(pairs.iter().find(|d| d.a == 0 && d.b == 1).unwrap().winner, 0);
        assert_eq!(ranking_to_pairs(&RankingPrediction::new("t", vec![1, 0]).unwrap()).len(), 1);
    }

    #[test]
    fn aggregate_examples() {
        let run = |t: f64| RunMetrics {
            tau_abs: t,
            pairwise_accuracy: 0.75,
            per_task: vec![],
        };
        let r = aggregate_runs(&[run(0.6), run(0.8)]).unwrap();
        assert!((r.tau_abs.mean - 0.7).abs() < 1e-12);
        assert!((r.tau_abs.std - 0.1).abs() < 1e-12);
        assert_eq!(r.pairwise_accuracy.std, 0.0);
        let single = aggregate_runs(&[run(0.3)]).unwrap();
        assert_eq!((single.tau_abs.mean, single.tau_abs.std), (0.3, 0.0));
    }

    #[test]
    fn score_ties_are_flagged() {
        let p = RankingPrediction::from_scores("t", vec![0.5, 0.9, 0.5]);
        assert_eq!(p.order, [1, 0, 2]);
        assert_eq!(p.flagged_ties, 1);
    }

    fn brute_tau(pred: &[usize], gold: &[usize]) -> f64 {
        let pp = positions_of(pred);
        let gp = positions_of(gold);
        let n = pred.len();
        let mut s = 0i64;
        for i in 0..n {
            for j in i + 1..n {
                s += if (pp[i] < pp[j]) == (gp[i] < gp[j]) { 1 } else { -1 };
            }
        }
        s as f64 / (n * (n - 1) / 2) as f64
    }

    fn perm(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<usize>> {
        n.prop_flat_map(|n| Just((0..n).collect::<Vec<_>>()).prop_shuffle())
    }

    proptest! {
        #[test]
        fn tau_matches_brute_force_sampled(p in perm(7..=8).prop_flat_map(|p| {
            let n = p.len();
            (Just(p), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        })) {
            prop_assert!((kendall_tau(&p.0, &p.1).unwrap() - brute_tau(&p.0, &p.1)).abs() < 1e-12);
        }

        #[test]
        fn tau_abs_reversal_invariant(p in perm(2..=12)) {
            let gold: Vec<usize> = (0..p.len()).collect();
            let rev: Vec<usize> = p.iter().rev().copied().collect();
            prop_assert_eq!(tau_abs(&p, &gold).unwrap(), tau_abs(&rev, &gold).unwrap());
        }

        #[test]
        fn accuracy_is_at_least_half(
            gold in perm(2..=9),
            wins in prop::collection::vec(any::<bool>(), 36),
            keep in subsequence((0..36).collect::<Vec<usize>>(), 1..=36),
        ) {
            let n = gold.len();
            let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
            let decisions: Vec<PairDecision> = keep
                .iter()
                .filter(|&&i| i < pairs.len())
                .map(|&i| dec(pairs[i].0, pairs[i].1, if wins[i] { pairs[i].0 } else { pairs[i].1 }, 0.1))
                .collect();
            prop_assume!(!decisions.is_empty());
            let acc = pairwise_accuracy(&decisions, &gold).unwrap();
            prop_assert!((0.5..=1.0).contains(&acc));
        }

        #[test]
        fn pairs_from_a_total_order_recover_it(p in perm(2..=10)) {
            let pred = RankingPrediction::new("t", p.clone()).unwrap();
            let back = pairs_to_ranking("t", p.len(), &ranking_to_pairs(&pred)).unwrap();
            prop_assert_eq!(back.order, p);
        }
    }
}
