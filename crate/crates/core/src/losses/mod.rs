//! Contrast-consistent ranking objectives and their supervised counterparts.
//!
//! Functions here act on probe *scores* and return partial derivatives with
//! respect to those scores. [`objective`] chains them through the probe
//! parameters.

pub mod objective;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use objective::{evaluate, evaluate_mean, Datapoint, LossKind, TaskBatch, TaskInputs};

const LOG_CLAMP: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    /// Keeps the anchor and its nearer item from collapsing in the triplet loss.
    pub positive_margin: f64,
    pub consistency_weight: f64,
    pub confidence_weight: f64,
    /// Square the per-column deviation of the listwise consistency term.
    pub ordreg_squared: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            positive_margin: 0.05,
            consistency_weight: 1.0,
            confidence_weight: 1.0,
            ordreg_squared: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.positive_margin >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "margins must be non-negative, got m={} m_pos={}",
                self.margin, self.positive_margin
            )));
        }
        Ok(())
    }
}

/// A loss on a handful of scores with `d_scores[i] = ∂total/∂score_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLoss {
    pub total: f64,
    pub consistency: f64,
    pub confidence: f64,
    pub d_scores: Vec<f64>,
}

/// A loss on an N×K score matrix with the matching gradient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixLoss {
    pub total: f64,
    pub consistency: f64,
    pub confidence: f64,
    pub d_matrix: Vec<Vec<f64>>,
}

/// A loss with its gradient over the flat probe parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub consistency: f64,
    pub confidence: f64,
    pub gradient: Vec<f64>,
}

/// `(s⁺ − (1 − s⁻))² + min(s⁺, s⁻)²`.
pub fn orig_ccs(s_pos: f64, s_neg: f64, cfg: &LossConfig) -> ScoreLoss {
    let gap = s_pos + s_neg - 1.0;
    let consistency = gap * gap;
    let lo = s_pos.min(s_neg);
    let confidence = lo * lo;
    let mut d = [2.0 * gap * cfg.consistency_weight; 2];
    if s_pos <= s_neg {
        d[0] += 2.0 * s_pos * cfg.confidence_weight;
    } else {
        d[1] += 2.0 * s_neg * cfg.confidence_weight;
    }
    ScoreLoss {
        total: cfg.consistency_weight * consistency + cfg.confidence_weight * confidence,
        consistency,
        confidence,
        d_scores: d.to_vec(),
    }
}

/// Hinge on whichever ordering of the pair is already closer to a margin-`m`
/// separation. Symmetric in its arguments.
pub fn margin_ccr(s_a: f64, s_b: f64, cfg: &LossConfig) -> ScoreLoss {
    let diff = s_a - s_b;
    let up = (diff + cfg.margin).max(0.0);
    let down = (-diff + cfg.margin).max(0.0);
    let w = cfg.confidence_weight;
    let (value, d) = if up <= down {
        (up, if up > 0.0 { [w, -w] } else { [0.0, 0.0] })
    } else {
        (down, if down > 0.0 { [-w, w] } else { [0.0, 0.0] })
    };
    ScoreLoss {
        total: w * value,
        consistency: 0.0,
        confidence: value,
        d_scores: d.to_vec(),
    }
}

/// Sign of `u − v` as the derivative of `|u − v|` in `u` (0 at the kink).
fn dabs(u: f64, v: f64) -> f64 {
    if u > v {
        1.0
    } else if u < v {
        -1.0
    } else {
        0.0
    }
}

/// Unlabelled triplet loss: the better of both positive/negative role
/// assignments, plus `max(0, m_pos − min(d(C,A), d(C,B)))`.
pub fn triplet_ccr(s_anchor: f64, s_a: f64, s_b: f64, cfg: &LossConfig) -> ScoreLoss {
    let da = (s_anchor - s_a).abs();
    let db = (s_anchor - s_b).abs();
    // gradients of da and db over (anchor, a, b)
    let gda = [dabs(s_anchor, s_a), -dabs(s_anchor, s_a), 0.0];
    let gdb = [dabs(s_anchor, s_b), 0.0, -dabs(s_anchor, s_b)];

    let r1 = (da - db + cfg.margin).max(0.0);
    let r2 = (db - da + cfg.margin).max(0.0);
    let mut d = [0.0; 3];
    let role = if r1 <= r2 {
        if r1 > 0.0 {
            (0..3).for_each(|i| d[i] += gda[i] - gdb[i]);
        }
        r1
    } else {
        if r2 > 0.0 {
            (0..3).for_each(|i| d[i] += gdb[i] - gda[i]);
        }
        r2
    };
    let near = da.min(db);
    let positive = (cfg.positive_margin - near).max(0.0);
    if positive > 0.0 {
        let g = if da <= db { gda } else { gdb };
        (0..3).for_each(|i| d[i] -= g[i]);
    }
    let w = cfg.confidence_weight;
    ScoreLoss {
        total: w * (role + positive),
        consistency: 0.0,
        confidence: role + positive,
        d_scores: d.iter().map(|x| x * w).collect(),
    }
}

fn check_square(matrix: &[Vec<f64>]) -> Result<usize> {
    let n = matrix.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("score matrix needs at least 2 rows, got {n}")));
    }
    if let Some(row) = matrix.iter().find(|r| r.len() != n) {
        return Err(Error::Dimension {
            context: "square score matrix".into(),
            expected: n,
            got: row.len(),
        });
    }
    Ok(n)
}

/// Listwise objective on the N×K matrix (N == K): column `k` should sum to
/// `K − k + 1` and every entry should sit near 0 or 1.
pub fn ordreg_ccr(matrix: &[Vec<f64>], cfg: &LossConfig) -> Result<MatrixLoss> {
    let k = check_square(matrix)?;
    let mut d = vec![vec![0.0; k]; matrix.len()];
    let mut consistency = 0.0;
    for col in 0..k {
        let target = (k - col) as f64;
        let sum: f64 = matrix.iter().map(|r| r[col]).sum();
        let dev = sum - target;
        let g = if cfg.ordreg_squared {
            consistency += dev * dev;
            2.0 * dev
        } else {
            consistency += dev.abs();
            dabs(sum, target)
        };
        for row in d.iter_mut() {
            row[col] += cfg.consistency_weight * g;
        }
    }
    let mut confidence = 0.0;
    for (row, drow) in matrix.iter().zip(d.iter_mut()) {
        for (s, g) in row.iter().zip(drow.iter_mut()) {
            confidence += s.min(1.0 - s);
            *g += cfg.confidence_weight * if *s <= 0.5 { 1.0 } else { -1.0 };
        }
    }
    Ok(MatrixLoss {
        total: cfg.consistency_weight * consistency + cfg.confidence_weight * confidence,
        consistency,
        confidence,
        d_matrix: d,
    })
}

fn bce(s: f64, target: f64) -> (f64, f64) {
    let p = s.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    let value = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
    let grad = -target / p + (1.0 - target) / (1.0 - p);
    (value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedKind {
    BcePairwise,
    MaxMargin,
    Triplet,
    CoralOrdinal,
}

/// Scores fed to a supervised ceiling.
#[derive(Debug, Clone, Copy)]
pub enum CeilingInput<'a> {
    /// Positive/negative prompt scores, or the two items' scores.
    Pair { s_pos: f64, s_neg: f64 },
    Triple { s_anchor: f64, s_a: f64, s_b: f64 },
    Matrix(&'a [Vec<f64>]),
}

#[derive(Debug, Clone, Copy)]
pub enum GoldLabel<'a> {
    /// The first item of the pair ranks above the second.
    FirstHigher(bool),
    /// `Some(true)` if `a` is the anchor's positive, `None` when both are
    /// equally far from the anchor in gold rank.
    PositiveIsA(Option<bool>),
    /// Rank of each row in `1..=K`, `K` being the best.
    Ranks(&'a [usize]),
}

/// Standard supervised losses. Supervised losses have no two-term split; the
/// whole value is reported as `consistency`.
pub fn supervised_ceiling(
    kind: SupervisedKind,
    input: CeilingInput<'_>,
    gold: Option<GoldLabel<'_>>,
    cfg: &LossConfig,
) -> Result<MatrixLoss> {
    let gold = gold.ok_or_else(|| Error::MissingGold(format!("{kind:?} ceiling")))?;
    let mismatch = || Error::InvalidArgument(format!("{kind:?} ceiling got mismatched input or label"));
    let flat = |total: f64, d: Vec<f64>| MatrixLoss {
        total,
        consistency: total,
        confidence: 0.0,
        d_matrix: vec![d],
    };
    match (kind, input, gold) {
        (SupervisedKind::BcePairwise, CeilingInput::Pair { s_pos, s_neg }, GoldLabel::FirstHigher(y)) => {
            let t = if y { 1.0 } else { 0.0 };
            let (lp, gp) = bce(s_pos, t);
            let (ln, gn) = bce(s_neg, 1.0 - t);
            Ok(flat(lp + ln, vec![gp, gn]))
        }
        (SupervisedKind::MaxMargin, CeilingInput::Pair { s_pos, s_neg }, GoldLabel::FirstHigher(y)) => {
            let sign = if y { 1.0 } else { -1.0 };
            let value = (cfg.margin - sign * (s_pos - s_neg)).max(0.0);
            let d = if value > 0.0 { vec![-sign, sign] } else { vec![0.0, 0.0] };
            Ok(flat(value, d))
        }
        (SupervisedKind::Triplet, CeilingInput::Triple { s_anchor, s_a, s_b }, GoldLabel::PositiveIsA(p)) => {
            let Some(a_is_pos) = p else {
                return Ok(flat(0.0, vec![0.0; 3]));
            };
            let (pos_idx, s_p, s_n) = if a_is_pos { (1, s_a, s_b) } else { (2, s_b, s_a) };
            let neg_idx = 3 - pos_idx;
            let value = ((s_anchor - s_p).abs() - (s_anchor - s_n).abs() + cfg.margin).max(0.0);
            let mut d = vec![0.0; 3];
            if value > 0.0 {
                let gp = dabs(s_anchor, s_p);
                let gn = dabs(s_anchor, s_n);
                d[0] = gp - gn;
                d[pos_idx] = -gp;
                d[neg_idx] = gn;
            }
            Ok(flat(value, d))
        }
        (SupervisedKind::CoralOrdinal, CeilingInput::Matrix(m), GoldLabel::Ranks(ranks)) => {
            let k = check_square(m)?;
            if ranks.len() != m.len() {
                return Err(mismatch());
            }
            let mut total = 0.0;
            let mut d = vec![vec![0.0; k]; m.len()];
            for ((row, &rank), drow) in m.iter().zip(ranks).zip(d.iter_mut()) {
                for (col, (s, g)) in row.iter().zip(drow.iter_mut()).enumerate() {
                    let t = if col < rank { 1.0 } else { 0.0 };
                    let (v, gv) = bce(*s, t);
                    total += v;
                    *g = gv;
                }
            }
            Ok(MatrixLoss {
                total,
                consistency: total,
                confidence: 0.0,
                d_matrix: d,
            })
        }
        _ => Err(mismatch()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-9;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < TOL
    }

    #[test]
    fn orig_ccs_examples() {
        let cfg = LossConfig::default();
        assert!(close(orig_ccs(1.0, 0.0, &cfg).total, 0.0));
        assert!(close(orig_ccs(0.5, 0.5, &cfg).total, 0.25));
        assert!(close(orig_ccs(0.8, 0.3, &cfg).total, 0.10));
        for i in 0..=100 {
            let s = i as f64 / 100.0;
            assert!(orig_ccs(s, 1.0 - s, &cfg).consistency < 1e-30);
        }
    }

    #[test]
    fn margin_examples() {
        let cfg = LossConfig::default();
        assert!(close(margin_ccr(0.9, 0.1, &cfg).total, 0.0));
        assert!(close(margin_ccr(0.5, 0.5, &cfg).total, 0.2));
        assert!(close(margin_ccr(0.55, 0.45, &cfg).total, 0.1));
        assert_eq!(margin_ccr(0.31, 0.7, &cfg).total, margin_ccr(0.7, 0.31, &cfg).total);
    }

    #[test]
    fn triplet_examples() {
        let cfg = LossConfig::default();
        // d(C,A) = 0.1, d(C,B) = 0.5
        assert!(close(triplet_ccr(0.5, 0.6, 0.0, &cfg).total, 0.0));
        assert!(close(triplet_ccr(0.4, 0.4, 0.4, &cfg).total, 0.25));
        // d(C,A) = d(C,B) = 0.3
        let l = triplet_ccr(0.5, 0.2, 0.8, &cfg);
        assert!(close(l.total, 0.2));
        assert_eq!(triplet_ccr(0.5, 0.2, 0.9, &cfg).total, triplet_ccr(0.5, 0.9, 0.2, &cfg).total);
    }

    #[test]
    fn ordreg_examples() {
        let cfg = LossConfig::default();
        assert_eq!(ordreg_ccr(&[vec![1.0, 1.0], vec![1.0, 0.0]], &cfg).unwrap().total, 0.0);
        assert!(close(ordreg_ccr(&[vec![0.5; 2], vec![0.5; 2]], &cfg).unwrap().total, 3.0));
        let stair = vec![
            vec![1.0, 1.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0, 1.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0, 0.0],
        ];
        assert_eq!(ordreg_ccr(&stair, &cfg).unwrap().total, 0.0);
        assert!(ordreg_ccr(&[vec![0.5; 3], vec![0.5; 3]], &cfg).is_err());

        let sq = LossConfig {
            ordreg_squared: true,
            ..cfg
        };
        // deviations 1 and 0, squared: 1 + confidence 2
        assert!(close(ordreg_ccr(&[vec![0.5; 2], vec![0.5; 2]], &sq).unwrap().total, 3.0));
    }

    #[test]
    fn supervised_examples() {
        let cfg = LossConfig::default();
        let bce = supervised_ceiling(
            SupervisedKind::BcePairwise,
            CeilingInput::Pair { s_pos: 1.0, s_neg: 0.0 },
            Some(GoldLabel::FirstHigher(true)),
            &cfg,
        )
        .unwrap();
        assert!(bce.total.abs() < 1e-12);

        let hinge = supervised_ceiling(
            SupervisedKind::MaxMargin,
            CeilingInput::Pair { s_pos: 0.8, s_neg: 0.3 },
            Some(GoldLabel::FirstHigher(true)),
            &cfg,
        )
        .unwrap();
        assert_eq!(hinge.total, 0.0);

        let m = vec![vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 0.0]];
        let coral = supervised_ceiling(
            SupervisedKind::CoralOrdinal,
            CeilingInput::Matrix(&m),
            Some(GoldLabel::Ranks(&[1, 3, 2])),
            &cfg,
        )
        .unwrap();
        assert!(coral.total.abs() < 1e-12);

        assert!(matches!(
            supervised_ceiling(SupervisedKind::MaxMargin, CeilingInput::Pair { s_pos: 0.1, s_neg: 0.2 }, None, &cfg),
            Err(Error::MissingGold(_))
        ));
    }

    #[test]
    fn negative_margin_rejected() {
        let cfg = LossConfig {
            margin: -0.1,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn staircase_rows(k: usize) -> Vec<Vec<f64>> {
        (1..=k).map(|r| (0..k).map(|c| if c < r { 1.0 } else { 0.0 }).collect()).collect()
    }

    #[test]
    fn ordreg_zero_set_on_binary_matrices() {
        // Over {0,1} matrices the loss vanishes exactly when the column sums
        // are K, K−1, …, 1. Every staircase row permutation qualifies; for
        // K ≥ 3 some non-staircase matrices do too.
        let cfg = LossConfig::default();
        for k in 2..=4usize {
            let stairs = staircase_rows(k);
            let mut zero = 0;
            let mut staircase_perms = 0;
            for bits in 0u32..(1 << (k * k)) {
                let m: Vec<Vec<f64>> = (0..k)
                    .map(|r| (0..k).map(|c| f64::from((bits >> (r * k + c)) & 1)).collect())
                    .collect();
                let total = ordreg_ccr(&m, &cfg).unwrap().total;
                let sums_match = (0..k).all(|c| m.iter().map(|row| row[c]).sum::<f64>() == (k - c) as f64);
                assert_eq!(total == 0.0, sums_match, "{m:?}");
                let mut rows = m.clone();
                rows.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let mut sorted_stairs = stairs.clone();
                sorted_stairs.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if rows == sorted_stairs {
                    staircase_perms += 1;
                    assert_eq!(total, 0.0);
                }
                zero += usize::from(total == 0.0);
            }
            assert_eq!(staircase_perms, (1..=k).product::<usize>());
            if k == 2 {
                assert_eq!(zero, staircase_perms);
            }
        }
        let not_stairs = [vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        assert_eq!(ordreg_ccr(&not_stairs, &cfg).unwrap().total, 0.0);
    }

    proptest! {
        #[test]
        fn margin_and_triplet_swap_invariant(c in 0.0f64..1.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let cfg = LossConfig::default();
            prop_assert_eq!(margin_ccr(a, b, &cfg).total, margin_ccr(b, a, &cfg).total);
            prop_assert_eq!(triplet_ccr(c, a, b, &cfg).total, triplet_ccr(c, b, a, &cfg).total);
        }

        #[test]
        fn orig_ccs_complement_is_consistent(s in 0.0f64..=1.0) {
            prop_assert!(orig_ccs(s, 1.0 - s, &LossConfig::default()).consistency < 1e-30);
        }

        #[test]
        fn losses_are_non_negative(
            c in 0.0f64..1.0, a in 0.0f64..1.0, b in 0.0f64..1.0,
            m in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 3),
        ) {
            let cfg = LossConfig::default();
            prop_assert!(orig_ccs(a, b, &cfg).total >= 0.0);
            prop_assert!(margin_ccr(a, b, &cfg).total >= 0.0);
            prop_assert!(triplet_ccr(c, a, b, &cfg).total >= 0.0);
            prop_assert!(ordreg_ccr(&m, &cfg).unwrap().total >= 0.0);
        }
    }
}
