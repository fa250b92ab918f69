//! Loss families: pairwise next-item loss, the co-occurrence contrastive
//! regulariser, the profile alignment loss, and their weighted sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{softplus, Graph, Mat, ParamStore, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("length mismatch: {0} positive scores vs {1} negative scores")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("contrastive loss needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("non-finite {component} loss: {value}")]
    NonFinite { component: &'static str, value: f64 },
}

/// `Σ −ln σ(pos − neg)` over all pairs.
pub fn srs_loss(pos: &[f64], neg: &[f64]) -> Result<f64, ObjectiveError> {
    if pos.len() != neg.len() {
        return Err(ObjectiveError::LengthMismatch(pos.len(), neg.len()));
    }
    Ok(pos.iter().zip(neg).map(|(p, n)| softplus(n - p)).sum())
}

/// Both anchor directions of a positive-excluding contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveParts {
    /// Rows of the first argument as anchors.
    pub first: f64,
    /// Rows of the second argument as anchors.
    pub second: f64,
}

impl ContrastiveParts {
    pub fn total(&self) -> f64 {
        self.first + self.second
    }
}

/// Graph form shared by [`reg_loss`] and [`align_loss`]: cosine similarities over
/// `temperature`, positives on the diagonal, and `j ≠ i` in every denominator.
pub fn contrastive_pair(g: &mut Graph, a: Var, b: Var, temperature: f64) -> (Var, Var) {
    let an = g.normalize_rows(a);
    let bn = g.normalize_rows(b);
    let sim = g.matmul_bt(an, bn);
    let sim = g.scale(sim, 1.0 / temperature);
    let first = g.contrastive_excl(sim);
    let sim_t = g.transpose(sim);
    let second = g.contrastive_excl(sim_t);
    (first, second)
}

fn contrastive_values(a: &Mat, b: &Mat, temperature: f64) -> Result<ContrastiveParts, ObjectiveError> {
    if a.shape() != b.shape() {
        return Err(ObjectiveError::ShapeMismatch(a.shape(), b.shape()));
    }
    if a.rows < 2 {
        return Err(ObjectiveError::BatchTooSmall(a.rows));
    }
    let empty = ParamStore::new();
    let mut g = Graph::new(&empty);
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let (f, s) = contrastive_pair(&mut g, va, vb, temperature);
    Ok(ContrastiveParts { first: g.scalar(f), second: g.scalar(s) })
}

/// Co-occurrence regulariser over paired domain-A / domain-B item rows.
pub fn reg_loss(pairs_a: &Mat, pairs_b: &Mat, gamma: f64) -> Result<ContrastiveParts, ObjectiveError> {
    contrastive_values(pairs_a, pairs_b, gamma)
}

/// Alignment between shared-thread user states and projected profiles.
pub fn align_loss(user_reps: &Mat, profile_projs: &Mat, tau: f64) -> Result<ContrastiveParts, ObjectiveError> {
    contrastive_values(user_reps, profile_projs, tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 1.0, gamma: 1.0, tau: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub srs_a: f64,
    pub srs_b: f64,
    pub reg: f64,
    pub profile: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

/// `total = srs_a + srs_b + α·reg + β·profile`; rejects any non-finite component.
pub fn total_loss(srs_a: f64, srs_b: f64, reg: f64, profile: f64, w: &LossWeights) -> Result<LossBreakdown, ObjectiveError> {
    for (component, value) in [("srs_a", srs_a), ("srs_b", srs_b), ("reg", reg), ("profile", profile)] {
        if !value.is_finite() {
            return Err(ObjectiveError::NonFinite { component, value });
        }
    }
    Ok(LossBreakdown {
        srs_a,
        srs_b,
        reg,
        profile,
        total: (srs_a + srs_b) + w.alpha * reg + w.beta * profile,
        alpha: w.alpha,
        beta: w.beta,
        gamma: w.gamma,
        tau: w.tau,
    })
}
