//! Scalar training objectives, built on a [`Tape`] so they can be differentiated.
//!
//! All logs go through [`Tape::ln_prob`], which clamps probabilities to
//! `[1e-12, 1 - 1e-12]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{Matrix, Tape, Var};

/// Values of every objective for one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub e_gy: f64,
    pub e_gd: f64,
    pub e_aux_label: f64,
    pub e_aux_domain: f64,
    /// Mean target prediction entropy, before scaling by `gamma`.
    pub entropy_term: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.e_gy,
            self.e_gd,
            self.e_aux_label,
            self.e_aux_domain,
            self.entropy_term,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `-Σ p ln p` of one probability row, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::Numeric(format!("invalid probability {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Numeric(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    Ok(-probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

fn check_labels(tape: &Tape, probs: Var, labels: &[usize]) -> Result<()> {
    let (rows, cols) = tape.value(probs).shape();
    if rows != labels.len() {
        return Err(Error::shape(format!(
            "{rows} prediction rows for {} labels",
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= cols) {
        return Err(Error::shape(format!("label {y} out of range for {cols} classes")));
    }
    Ok(())
}

fn check_column(tape: &Tape, v: Var, n: Option<usize>, what: &str) -> Result<()> {
    let (rows, cols) = tape.value(v).shape();
    if cols != 1 || n.is_some_and(|n| n != rows) {
        return Err(Error::shape(format!(
            "{what}: expected a column of {} rows, got {rows}x{cols}",
            n.map_or_else(|| "any".to_owned(), |n| n.to_string())
        )));
    }
    if rows == 0 {
        return Err(Error::shape(format!("{what}: empty batch")));
    }
    Ok(())
}

/// `(1/n) Σ_i w_i · (-ln p_{i, y_i})`.
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    weights: &[f64],
) -> Result<Var> {
    check_labels(tape, probs, labels)?;
    if weights.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} weights for {} examples",
            weights.len(),
            labels.len()
        )));
    }
    let (n, c) = tape.value(probs).shape();
    if n == 0 {
        return Err(Error::shape("cross-entropy over an empty batch"));
    }
    let mut mask = Matrix::zeros(n, c);
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        mask.set(i, y, -w / n as f64);
    }
    let lp = tape.ln_prob(probs)?;
    let picked = tape.mul_const(lp, mask)?;
    Ok(tape.sum(picked))
}

/// Mean row entropy `(1/n) Σ_j H(p_j)`.
pub fn mean_entropy(tape: &mut Tape, probs: Var) -> Result<Var> {
    let n = tape.value(probs).rows();
    if n == 0 {
        return Err(Error::shape("entropy over an empty batch"));
    }
    let lp = tape.ln_prob(probs)?;
    let plp = tape.mul(probs, lp)?;
    let s = tape.sum(plp);
    Ok(tape.scale(s, -1.0 / n as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierLoss {
    pub total: Var,
    /// Unscaled mean target entropy.
    pub entropy: Var,
}

/// Weighted source cross-entropy plus `gamma` times the mean target entropy.
///
/// Weights apply to source examples only.
pub fn loss_classifier(
    tape: &mut Tape,
    probs_s: Var,
    labels_s: &[usize],
    weights: &[f64],
    probs_t: Var,
    gamma: f64,
) -> Result<ClassifierLoss> {
    if !(gamma >= 0.0) {
        return Err(Error::Usage(format!("gamma must be >= 0, got {gamma}")));
    }
    let ce = weighted_cross_entropy(tape, probs_s, labels_s, weights)?;
    let entropy = mean_entropy(tape, probs_t)?;
    let scaled = tape.scale(entropy, gamma);
    let total = tape.add(ce, scaled)?;
    Ok(ClassifierLoss { total, entropy })
}

/// `-(1/n) Σ w_i ln d_i` over an `(n, 1)` column.
fn weighted_log_term(tape: &mut Tape, d: Var, weights: Option<&[f64]>, complement: bool) -> Result<Var> {
    let n = tape.value(d).rows();
    let arg = if complement { tape.one_minus(d) } else { d };
    let l = tape.ln_prob(arg)?;
    let s = match weights {
        Some(w) => {
            let wl = tape.mul_const(l, Matrix::column_vector(w.to_vec()))?;
            tape.sum(wl)
        }
        None => tape.sum(l),
    };
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Weighted domain cross-entropy with source as the positive class:
/// `-(1/n_s) Σ w_i ln d_s,i - (1/n_t) Σ ln(1 - d_t,j)`.
pub fn loss_discriminator(tape: &mut Tape, d_s: Var, weights: &[f64], d_t: Var) -> Result<Var> {
    check_column(tape, d_s, Some(weights.len()), "source domain probabilities")?;
    check_column(tape, d_t, None, "target domain probabilities")?;
    let src = weighted_log_term(tape, d_s, Some(weights), false)?;
    let tgt = weighted_log_term(tape, d_t, None, true)?;
    tape.add(src, tgt)
}

/// One-vs-rest binary cross-entropy of leaky-softmax scores, scaled by `lambda`:
/// `-(λ/n) Σ_i Σ_c [y_ic ln s_ic + (1 - y_ic) ln(1 - s_ic)]`.
pub fn loss_aux_label(tape: &mut Tape, scores_s: Var, labels_s: &[usize], lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Usage(format!("lambda must be >= 0, got {lambda}")));
    }
    check_labels(tape, scores_s, labels_s)?;
    let (n, c) = tape.value(scores_s).shape();
    if n == 0 {
        return Err(Error::shape("auxiliary label loss over an empty batch"));
    }
    let mut pos = Matrix::zeros(n, c);
    for (i, &y) in labels_s.iter().enumerate() {
        pos.set(i, y, 1.0);
    }
    let neg = pos.map(|v| 1.0 - v);
    let lp = tape.ln_prob(scores_s)?;
    let pos_terms = tape.mul_const(lp, pos)?;
    let comp = tape.one_minus(scores_s);
    let ln_comp = tape.ln_prob(comp)?;
    let neg_terms = tape.mul_const(ln_comp, neg)?;
    let all = tape.add(pos_terms, neg_terms)?;
    let s = tape.sum(all);
    Ok(tape.scale(s, -lambda / n as f64))
}

/// Unweighted domain cross-entropy of the auxiliary domain score.
pub fn loss_aux_domain(tape: &mut Tape, gd_s: Var, gd_t: Var) -> Result<Var> {
    check_column(tape, gd_s, None, "auxiliary source scores")?;
    check_column(tape, gd_t, None, "auxiliary target scores")?;
    let src = weighted_log_term(tape, gd_s, None, false)?;
    let tgt = weighted_log_term(tape, gd_t, None, true)?;
    tape.add(src, tgt)
}

#[derive(Debug, Clone, Copy)]
pub struct DannLoss {
    pub total: Var,
    pub classification: Var,
    pub domain: Var,
}

/// Source cross-entropy plus domain cross-entropy averaged jointly over all
/// examples. `domain_labels[i]` is true for source rows of `d_all`.
///
/// The adversarial sign comes from a gradient reversal inside the
/// discriminator forward pass, not from this function.
pub fn loss_dann(
    tape: &mut Tape,
    probs_s: Var,
    labels_s: &[usize],
    d_all: Var,
    domain_labels: &[bool],
) -> Result<DannLoss> {
    let n_s = labels_s.len();
    let classification = weighted_cross_entropy(tape, probs_s, labels_s, &vec![1.0; n_s])?;
    check_column(tape, d_all, Some(domain_labels.len()), "domain probabilities")?;
    let n_a = domain_labels.len() as f64;
    let pos = Matrix::column_vector(domain_labels.iter().map(|&s| f64::from(u8::from(s))).collect());
    let neg = pos.map(|v| 1.0 - v);
    let lp = tape.ln_prob(d_all)?;
    let pos_terms = tape.mul_const(lp, pos)?;
    let comp = tape.one_minus(d_all);
    let ln_comp = tape.ln_prob(comp)?;
    let neg_terms = tape.mul_const(ln_comp, neg)?;
    let all = tape.add(pos_terms, neg_terms)?;
    let s = tape.sum(all);
    let domain = tape.scale(s, -1.0 / n_a);
    let total = tape.add(classification, domain)?;
    Ok(DannLoss {
        total,
        classification,
        domain,
    })
}
