//! Classification and metric losses.
//!
//! Class probability: softmax over cosine similarities between point
//! embeddings and the hierarchical text embeddings of the active label set,
//! scaled by a temperature. Cross-entropy aligns points with their labels;
//! the sibling hinge loss additionally pulls a point toward its own label's
//! embedding (Euclidean) and pushes it at least `margin` away from the
//! label's siblings.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hierarchy::{HierarchicalEmbeddings, LabelHierarchy, NodeId};
use crate::network::PointEmbeddings;
use crate::numcore::Tensor;

const LOG_CLAMP: f64 = 1e-12;

/// Per-point probability rows over an active label set.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// M×K rows, each summing to 1.
    pub probs: Tensor,
    /// Active label ids, ascending; columns of `probs` follow this order.
    pub active: Vec<NodeId>,
    /// Winning label per point; ties break toward the smaller label id.
    pub argmax: Vec<NodeId>,
}

fn cosine_parts(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64)> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-30 || nb < 1e-30 {
        return Err(Error::Numeric("zero-norm embedding in cosine similarity".into()));
    }
    let dot = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok((dot / (na * nb), na, nb))
}

/// Softmax over temperature-scaled cosine similarities.
pub fn class_prob(
    emb: &PointEmbeddings,
    hier: &HierarchicalEmbeddings,
    active: &[NodeId],
    tau: f64,
) -> Result<Prediction> {
    if active.is_empty() {
        return Err(Error::EmptyInput("class_prob with an empty active set".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature {tau} must be > 0")));
    }
    let mut active = active.to_vec();
    active.sort_unstable();
    active.dedup();
    let (m, c) = emb.values.dims2()?;
    if hier.width != c {
        return Err(Error::Shape(format!(
            "embedding width {c} vs hierarchical text width {}",
            hier.width
        )));
    }
    let rows: Vec<&[f64]> = active
        .iter()
        .map(|&id| hier.row(id))
        .collect::<Result<_>>()?;
    let k = active.len();
    let mut probs = vec![0.0f64; m * k];
    let mut argmax = Vec::with_capacity(m);
    for i in 0..m {
        let a = emb.values.row(i);
        let row = &mut probs[i * k..(i + 1) * k];
        for (j, b) in rows.iter().enumerate() {
            let (cos, _, _) = cosine_parts(a, b)?;
            row[j] = cos / tau;
        }
        crate::numcore::softmax_in_place(row);
        let mut best = 0usize;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        argmax.push(active[best]);
    }
    Ok(Prediction {
        probs: Tensor::from_parts(vec![m, k], probs),
        active,
        argmax,
    })
}

/// Mean `−log prob(truth)`. Returns the loss and the number of points whose
/// probability had to be clamped at `1e-12`.
pub fn ce_loss(pred: &Prediction, truth: &[NodeId]) -> Result<(f64, u64)> {
    let (m, k) = pred.probs.dims2()?;
    if truth.len() != m {
        return Err(Error::Data(format!("{} truth labels for {m} points", truth.len())));
    }
    let mut loss = 0.0;
    let mut clamped = 0u64;
    for (i, &t) in truth.iter().enumerate() {
        let j = pred
            .active
            .binary_search(&t)
            .map_err(|_| Error::Data(format!("truth label {t} not in the active set")))?;
        let mut p = pred.probs.row(i)[j];
        if p < LOG_CLAMP {
            p = LOG_CLAMP;
            clamped += 1;
        }
        loss -= p.ln();
    }
    let _ = k;
    Ok((loss / m as f64, clamped))
}

/// Gradients that flow out of the classification losses: one cotangent for
/// the point embeddings, one per hierarchical text row.
#[derive(Debug, Clone, Default)]
pub struct LossGrads {
    pub d_emb: Option<Tensor>,
    pub d_rows: BTreeMap<NodeId, Vec<f64>>,
}

impl LossGrads {
    pub fn merge_scaled(&mut self, other: &LossGrads, scale: f64) -> Result<()> {
        if let Some(o) = &other.d_emb {
            match &mut self.d_emb {
                Some(d) => {
                    for (a, b) in d.data_mut().iter_mut().zip(o.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    let mut t = o.clone();
                    t.scale_in_place(scale);
                    self.d_emb = Some(t);
                }
            }
        }
        for (id, row) in &other.d_rows {
            let dst = self
                .d_rows
                .entry(*id)
                .or_insert_with(|| vec![0.0; row.len()]);
            for (a, b) in dst.iter_mut().zip(row) {
                *a += scale * b;
            }
        }
        Ok(())
    }
}

/// Cross-entropy over [`class_prob`] with gradients for both embedding
/// sides. Returns `(loss, clamped count, prediction, grads)`.
pub fn ce_loss_grads(
    emb: &PointEmbeddings,
    hier: &HierarchicalEmbeddings,
    active: &[NodeId],
    tau: f64,
    truth: &[NodeId],
) -> Result<(f64, u64, Prediction, LossGrads)> {
    let pred = class_prob(emb, hier, active, tau)?;
    let (loss, clamped) = ce_loss(&pred, truth)?;
    let (m, c) = emb.values.dims2()?;
    let rows: Vec<&[f64]> = pred
        .active
        .iter()
        .map(|&id| hier.row(id))
        .collect::<Result<_>>()?;
    let mut d_emb = Tensor::zeros(vec![m, c]);
    let mut d_rows: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    let inv_m = 1.0 / m as f64;
    for i in 0..m {
        let a = emb.values.row(i);
        let t_idx = pred
            .active
            .binary_search(&truth[i])
            .expect("validated by ce_loss");
        let prow = pred.probs.row(i);
        for (j, b) in rows.iter().enumerate() {
            // dL/dlogit_j = (p_j − 1[j == truth]) / M ; logit = cos / τ
            let dlogit = (prow[j] - if j == t_idx { 1.0 } else { 0.0 }) * inv_m;
            let dcos = dlogit / tau;
            let (cos, na, nb) = cosine_parts(a, b)?;
            let demb_row = d_emb.row_mut(i);
            for ((da, &av), &bv) in demb_row.iter_mut().zip(a).zip(*b) {
                *da += dcos * (bv / (na * nb) - cos * av / (na * na));
            }
            let drow = d_rows
                .entry(pred.active[j])
                .or_insert_with(|| vec![0.0; c]);
            for ((db, &bv), &av) in drow.iter_mut().zip(*b).zip(a) {
                *db += dcos * (av / (na * nb) - cos * bv / (nb * nb));
            }
        }
    }
    Ok((
        loss,
        clamped,
        pred,
        LossGrads {
            d_emb: Some(d_emb),
            d_rows,
        },
    ))
}

/// Sibling-margin hinge loss, mean over points:
/// `dist(e, t_truth) + Σ_{siblings} max(margin − dist(e, t_sib), 0)` with
/// Euclidean distance.
pub fn hinge_loss(
    emb: &PointEmbeddings,
    truth: &[NodeId],
    h: &LabelHierarchy,
    hier: &HierarchicalEmbeddings,
    margin: f64,
) -> Result<f64> {
    Ok(hinge_loss_grads(emb, truth, h, hier, margin)?.0)
}

/// [`hinge_loss`] with gradients; returns `(loss, grads)`.
pub fn hinge_loss_grads(
    emb: &PointEmbeddings,
    truth: &[NodeId],
    h: &LabelHierarchy,
    hier: &HierarchicalEmbeddings,
    margin: f64,
) -> Result<(f64, LossGrads)> {
    if !(margin > 0.0) {
        return Err(Error::Parameter(format!("margin {margin} must be > 0")));
    }
    let (m, c) = emb.values.dims2()?;
    if truth.len() != m {
        return Err(Error::Data(format!("{} truth labels for {m} points", truth.len())));
    }
    let mut loss = 0.0;
    let mut d_emb = Tensor::zeros(vec![m, c]);
    let mut d_rows: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    let inv_m = 1.0 / m as f64;
    for i in 0..m {
        let a = emb.values.row(i);
        let v = truth[i];
        let t_row = hier.row(v)?;
        let dist = a
            .iter()
            .zip(t_row)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        loss += dist * inv_m;
        if dist > 1e-12 {
            let coef = inv_m / dist;
            let demb_row = d_emb.row_mut(i);
            let drow = d_rows.entry(v).or_insert_with(|| vec![0.0; c]);
            for (j, (&av, &tv)) in a.iter().zip(t_row).enumerate() {
                let g = coef * (av - tv);
                demb_row[j] += g;
                drow[j] -= g;
            }
        }
        for s in h.siblings(v)? {
            let s_row = hier.row(s)?;
            let sdist = a
                .iter()
                .zip(s_row)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if sdist < margin {
                loss += (margin - sdist) * inv_m;
                if sdist > 1e-12 {
                    let coef = inv_m / sdist;
                    let demb_row = d_emb.row_mut(i);
                    let drow = d_rows.entry(s).or_insert_with(|| vec![0.0; c]);
                    for (j, (&av, &sv)) in a.iter().zip(s_row).enumerate() {
                        let g = coef * (av - sv);
                        demb_row[j] -= g;
                        drow[j] += g;
                    }
                }
            }
        }
    }
    Ok((
        loss,
        LossGrads {
            d_emb: Some(d_emb),
            d_rows,
        },
    ))
}

/// `L = L_CE + α·L_h`.
pub fn total_loss(ce: f64, hinge: f64, alpha: f64) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::Parameter(format!("alpha {alpha} must be ≥ 0")));
    }
    Ok(ce + alpha * hinge)
}
