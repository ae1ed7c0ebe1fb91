//! Linear probes: the affine sigmoid scorer and the CORAL multi-threshold
//! scorer whose K biases come from a two-parameter Beta-shaped profile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::Dimension {
            context: "probe input".into(),
            expected,
            got: x.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub theta: Vec<f64>,
    pub bias: f64,
}

impl LinearProbe {
    pub fn zeros(dim: usize) -> Self {
        LinearProbe {
            theta: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x)?;
        Ok(dot(&self.theta, x) + self.bias)
    }

    /// `σ(θᵀx + b)`.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        self.logit(x).map(sigmoid)
    }
}

/// Shared weight vector plus K ordered thresholds derived from `(alpha, beta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoralProbe {
    pub theta: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl CoralProbe {
    /// Zero weights with the uniform profile `alpha = beta = 1`.
    pub fn uninformative(dim: usize) -> Self {
        CoralProbe {
            theta: vec![0.0; dim],
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x)?;
        Ok(dot(&self.theta, x))
    }
}

/// Strictly decreasing, zero-mean threshold offsets `b_1 > … > b_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasVector(pub Vec<f64>);

impl BiasVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn coral_biases(alpha: f64, beta: f64, k: usize) -> Result<BiasVector> {
    Ok(BiasVector(coral_biases_with_grad(alpha, beta, k)?.biases))
}

pub(crate) struct BiasGrad {
    pub biases: Vec<f64>,
    pub d_alpha: Vec<f64>,
    pub d_beta: Vec<f64>,
}

/// Biases plus their partial derivatives in `alpha` and `beta`.
///
/// Cut points `δ_k = k/(K+1)` are reshaped by `δ^(α−1)(1−δ)^(β−1)`, summed
/// right to left and centered.
pub(crate) fn coral_biases_with_grad(alpha: f64, beta: f64, k: usize) -> Result<BiasGrad> {
    if !(alpha > 0.0 && beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "alpha and beta must be positive, got ({alpha}, {beta})"
        )));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 thresholds, got {k}")));
    }
    let cuts: Vec<f64> = (1..=k).map(|i| i as f64 / (k + 1) as f64).collect();
    let shaped: Vec<f64> = cuts
        .iter()
        .map(|d| d.powf(alpha - 1.0) * (1.0 - d).powf(beta - 1.0))
        .collect();
    let shaped_da: Vec<f64> = shaped.iter().zip(&cuts).map(|(s, d)| s * d.ln()).collect();
    let shaped_db: Vec<f64> = shaped.iter().zip(&cuts).map(|(s, d)| s * (1.0 - d).ln()).collect();
    Ok(BiasGrad {
        biases: reverse_cumsum_centered(&shaped),
        d_alpha: reverse_cumsum_centered(&shaped_da),
        d_beta: reverse_cumsum_centered(&shaped_db),
    })
}

fn reverse_cumsum_centered(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let mut acc = 0.0;
    for i in (0..v.len()).rev() {
        acc += v[i];
        out[i] = acc;
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    out.iter_mut().for_each(|x| *x -= mean);
    out
}

/// One row of the N×K score matrix: `σ(θᵀx + b_k)` for every threshold.
pub fn coral_scores(probe: &CoralProbe, x: &[f64], k: usize) -> Result<Vec<f64>> {
    let z = probe.logit(x)?;
    let b = coral_biases(probe.alpha, probe.beta, k)?;
    Ok(b.0.iter().map(|bk| sigmoid(z + bk)).collect())
}

/// Number of thresholds passed, floored at 1: `[1,1,1,0]` reads as rank 3.
pub fn predict_rank(row: &[f64]) -> usize {
    row.iter().filter(|&&s| s > 0.5).count().max(1)
}

/// Probability that the "Yes" reading of a contrast pair is the true one,
/// averaging the evidence from both prompts.
pub fn pair_score(f_pos: f64, f_neg: f64) -> f64 {
    0.5 * (f_pos + (1.0 - f_neg))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Probe {
    Linear(LinearProbe),
    Coral(CoralProbe),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeShape {
    Linear { dim: usize },
    Coral { dim: usize },
}

impl ProbeShape {
    pub fn dim(self) -> usize {
        match self {
            ProbeShape::Linear { dim } | ProbeShape::Coral { dim } => dim,
        }
    }

    /// Length of the flat parameter vector: `d + 1` or `d + 2`.
    pub fn n_params(self) -> usize {
        match self {
            ProbeShape::Linear { dim } => dim + 1,
            ProbeShape::Coral { dim } => dim + 2,
        }
    }

    /// Flat parameters are `[θ, b]` or `[θ, softplus⁻¹(α), softplus⁻¹(β)]`.
    pub fn to_probe(self, params: &[f64]) -> Probe {
        debug_assert_eq!(params.len(), self.n_params());
        match self {
            ProbeShape::Linear { dim } => Probe::Linear(LinearProbe {
                theta: params[..dim].to_vec(),
                bias: params[dim],
            }),
            ProbeShape::Coral { dim } => Probe::Coral(CoralProbe {
                theta: params[..dim].to_vec(),
                alpha: softplus(params[dim]),
                beta: softplus(params[dim + 1]),
            }),
        }
    }
}

impl Probe {
    pub fn shape(&self) -> ProbeShape {
        match self {
            Probe::Linear(p) => ProbeShape::Linear { dim: p.dim() },
            Probe::Coral(p) => ProbeShape::Coral { dim: p.dim() },
        }
    }

    pub fn to_params(&self) -> Vec<f64> {
        match self {
            Probe::Linear(p) => p.theta.iter().copied().chain([p.bias]).collect(),
            Probe::Coral(p) => p
                .theta
                .iter()
                .copied()
                .chain([softplus_inv(p.alpha), softplus_inv(p.beta)])
                .collect(),
        }
    }

    /// Scalar ranking score of each item of one task. CORAL probes use the
    /// mean of the row with `K` equal to the number of items.
    pub fn item_scores(&self, vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
        match self {
            Probe::Linear(p) => vectors.iter().map(|x| p.score(x)).collect(),
            Probe::Coral(p) => {
                let k = vectors.len().max(2);
                vectors
                    .iter()
                    .map(|x| coral_scores(p, x, k).map(|row| row.iter().sum::<f64>() / k as f64))
                    .collect()
            }
        }
    }

    pub fn to_document(&self) -> ProbeDocument {
        match self {
            Probe::Linear(p) => ProbeDocument {
                kind: "linear".into(),
                theta: p.theta.clone(),
                bias: Some(p.bias),
                alpha: None,
                beta: None,
                dim: p.dim(),
                k: None,
            },
            Probe::Coral(p) => ProbeDocument {
                kind: "coral".into(),
                theta: p.theta.clone(),
                bias: None,
                alpha: Some(p.alpha),
                beta: Some(p.beta),
                dim: p.dim(),
                k: None,
            },
        }
    }

    pub fn from_document(doc: &ProbeDocument) -> Result<Self> {
        if doc.theta.len() != doc.dim {
            return Err(Error::Dimension {
                context: "probe document".into(),
                expected: doc.dim,
                got: doc.theta.len(),
            });
        }
        if doc.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("probe theta".into()));
        }
        let missing = |f: &str| Error::Validation(format!("{} probe document lacks {f:?}", doc.kind));
        match doc.kind.as_str() {
            "linear" => Ok(Probe::Linear(LinearProbe {
                theta: doc.theta.clone(),
                bias: doc.bias.ok_or_else(|| missing("bias"))?,
            })),
            "coral" => {
                let alpha = doc.alpha.ok_or_else(|| missing("alpha"))?;
                let beta = doc.beta.ok_or_else(|| missing("beta"))?;
                if !(alpha > 0.0 && beta > 0.0) {
                    return Err(Error::Validation("coral alpha/beta must be positive".into()));
                }
                Ok(Probe::Coral(CoralProbe {
                    theta: doc.theta.clone(),
                    alpha,
                    beta,
                }))
            }
            other => Err(Error::Validation(format!("unknown probe kind {other:?}"))),
        }
    }
}

/// Probe JSON: `{"kind", "theta", "bias" | "alpha","beta", "dim", "K"?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDocument {
    pub kind: String,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    pub dim: usize,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl ProbeDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            source_name: "probe document".into(),
            record: 0,
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
