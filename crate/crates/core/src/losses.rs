//! Contrastive objectives on embedding batches, with exact analytic
//! gradients with respect to the embeddings.
//!
//! Six losses: the instance-discrimination loss [`nce_loss`], the supervised
//! loss [`supcon_loss`], the cross-modal loss [`cmc_loss`], and their
//! subject-invariant counterparts [`sicl_loss`], [`si_supcon_loss`] and
//! [`si_cmc_loss`], which decompose each anchor's negatives into same-subject
//! and different-subject sets and reweight the same-subject part by the
//! batch-wise weight [`q_weight`].
//!
//! Conventions shared by every loss and by the brute-force oracles in
//! [`crate::verify`]:
//!
//! - the positive term is included in the denominator (so values are >= 0)
//!   and is never reweighted;
//! - values are means over anchors (and over directions for the cross-modal
//!   losses);
//! - `Q` is treated as a constant during differentiation (stop-gradient).

use crate::error::{Error, Result};
use crate::numerics::tensor::{self, Tensor};

/// Softmax temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::contract(format!(
                "temperature must be finite and > 0, got {tau}"
            )));
        }
        Ok(Temperature(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// A batch of unit-norm embeddings with aligned metadata.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    z: Tensor,
    subject_ids: Vec<u16>,
    labels: Option<Vec<u16>>,
    view_of: Option<Vec<usize>>,
}

const NORM_TOLERANCE: f64 = 1e-9;

impl EmbeddingBatch {
    /// Validates row norms (1 ± 1e-9), metadata lengths and — when present —
    /// that `view_of` is an involution pairing distinct indices.
    pub fn new(
        z: Tensor,
        subject_ids: Vec<u16>,
        labels: Option<Vec<u16>>,
        view_of: Option<Vec<usize>>,
    ) -> Result<Self> {
        let (n, _) = z.dims2()?;
        if n == 0 {
            return Err(Error::contract("embedding batch is empty"));
        }
        for i in 0..n {
            let norm: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::contract(format!(
                    "embedding row {i} has norm {norm}, expected 1"
                )));
            }
        }
        let batch = Self::new_unchecked(z, subject_ids, labels, view_of);
        batch.validate_metadata()?;
        Ok(batch)
    }

    /// Skips the row-norm check. Intended for tests and finite-difference
    /// probes that perturb rows off the unit sphere.
    pub fn new_unchecked(
        z: Tensor,
        subject_ids: Vec<u16>,
        labels: Option<Vec<u16>>,
        view_of: Option<Vec<usize>>,
    ) -> Self {
        EmbeddingBatch {
            z,
            subject_ids,
            labels,
            view_of,
        }
    }

    fn validate_metadata(&self) -> Result<()> {
        let n = self.n();
        if self.subject_ids.len() != n {
            return Err(Error::contract(format!(
                "{} subject ids for batch of {n}",
                self.subject_ids.len()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::contract(format!(
                    "{} labels for batch of {n}",
                    labels.len()
                )));
            }
        }
        if let Some(pairs) = &self.view_of {
            if pairs.len() != n {
                return Err(Error::contract(format!(
                    "{} pairings for batch of {n}",
                    pairs.len()
                )));
            }
            for (i, &j) in pairs.iter().enumerate() {
                if j >= n || j == i || pairs[j] != i {
                    return Err(Error::contract(format!(
                        "view_of is not an involution on distinct indices at anchor {i}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn z(&self) -> &Tensor {
        &self.z
    }

    pub fn subject_ids(&self) -> &[u16] {
        &self.subject_ids
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn view_of(&self) -> Option<&[usize]> {
        self.view_of.as_deref()
    }

    fn require_pairing(&self) -> Result<&[usize]> {
        self.view_of
            .as_deref()
            .ok_or_else(|| Error::contract("loss requires a view pairing"))
    }

    fn require_labels(&self) -> Result<&[u16]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::contract("loss requires labels"))
    }
}

/// Scalar loss with its analytic gradient with respect to every embedding.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_z: Tensor,
    /// Loss contribution of each anchor (the value is their mean).
    pub per_anchor: Vec<f64>,
}

/// Cross-modal loss result: gradients flow to both modality embeddings.
#[derive(Debug, Clone)]
pub struct CmcLossResult {
    pub value: f64,
    pub grad_k: Tensor,
    pub grad_m: Tensor,
}

/// Batch-wise per-anchor weights for same-subject negatives.
#[derive(Debug, Clone)]
pub struct QWeights {
    /// Same-subject share of each anchor's negative softmax mass.
    pub p: Vec<f64>,
    /// `p` normalized by its mean over anchors with same-subject negatives;
    /// 1 for anchors without any.
    pub q: Vec<f64>,
    /// True when no anchor had a same-subject negative and `q` fell back to 1.
    pub degenerate: bool,
}

/// Scaled similarity grid `g[i*n+a] = rows_i . cols_a / tau` with per-row max
/// over a candidate set, for stable exponentials.
struct SimGrid {
    n: usize,
    g: Vec<f64>,
}

impl SimGrid {
    fn within(z: &Tensor, tau: f64) -> Self {
        let sims = tensor::matmul_nt(z, z).expect("z is rank 2");
        SimGrid {
            n: z.shape()[0],
            g: sims.data().iter().map(|v| v / tau).collect(),
        }
    }

    fn across(zk: &Tensor, zm: &Tensor, tau: f64) -> Result<Self> {
        let sims = tensor::matmul_nt(zk, zm)?;
        Ok(SimGrid {
            n: zk.shape()[0],
            g: sims.data().iter().map(|v| v / tau).collect(),
        })
    }

    fn at(&self, i: usize, a: usize) -> f64 {
        self.g[i * self.n + a]
    }

    /// Max over the candidates of anchor `i` (all indices, optionally
    /// excluding `i` itself).
    fn row_max(&self, i: usize, exclude_self: bool) -> f64 {
        let mut m = f64::NEG_INFINITY;
        for a in 0..self.n {
            if exclude_self && a == i {
                continue;
            }
            m = m.max(self.at(i, a));
        }
        m
    }
}

/// Q construction shared by all subject-invariant losses: for each anchor,
/// `p_i` is the same-subject share of the exponentiated similarities over the
/// anchor's negative set, and `q_i = p_i / mean(p)` with the mean taken over
/// anchors that have at least one same-subject negative. Anchors without one
/// get `p_i = 0` and `q_i = 1`; if every anchor is empty, `q` degenerates to
/// all ones.
fn q_from_grid(
    grid: &SimGrid,
    negatives: impl Fn(usize, usize) -> bool,
    same_subject: impl Fn(usize, usize) -> bool,
) -> QWeights {
    let n = grid.n;
    let mut p = vec![0.0; n];
    let mut has_same = vec![false; n];
    for i in 0..n {
        let m = grid.row_max(i, true);
        let mut same = 0.0;
        let mut all = 0.0;
        for a in 0..n {
            if a == i || !negatives(i, a) {
                continue;
            }
            let e = (grid.at(i, a) - m).exp();
            all += e;
            if same_subject(i, a) {
                same += e;
                has_same[i] = true;
            }
        }
        if has_same[i] {
            p[i] = same / all;
        }
    }
    let contributors = has_same.iter().filter(|&&b| b).count();
    if contributors == 0 {
        log::warn!("q_weight: no anchor has a same-subject negative, falling back to Q = 1");
        return QWeights {
            p,
            q: vec![1.0; n],
            degenerate: true,
        };
    }
    let mean = p.iter().sum::<f64>() / contributors as f64;
    let q = p
        .iter()
        .zip(&has_same)
        .map(|(&pi, &has)| if has { pi / mean } else { 1.0 })
        .collect();
    QWeights {
        p,
        q,
        degenerate: false,
    }
}

/// Weighted softmax-contrast core shared by the unimodal losses.
///
/// For each anchor `i`: `loss_i = log( sum_{a != i} w(i,a) e^{g_ia} )
/// - mean_{p in P(i)} g_ip`, value = mean over anchors, gradient via the
/// stop-gradient-in-`w` chain rule.
fn weighted_contrast(
    z: &Tensor,
    grid: &SimGrid,
    tau: f64,
    weight: impl Fn(usize, usize) -> f64,
    positives: &[Vec<usize>],
) -> LossResult {
    let n = grid.n;
    let mut per_anchor = Vec::with_capacity(n);
    let mut coef = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let m = grid.row_max(i, true);
        let mut dsum = 0.0;
        for a in 0..n {
            if a == i {
                continue;
            }
            dsum += weight(i, a) * (grid.at(i, a) - m).exp();
        }
        let log_d = m + dsum.ln();
        let pos = &positives[i];
        let mean_pos: f64 = pos.iter().map(|&p| grid.at(i, p)).sum::<f64>() / pos.len() as f64;
        per_anchor.push(log_d - mean_pos);

        let c = coef.data_mut();
        for a in 0..n {
            if a == i {
                continue;
            }
            let sigma = weight(i, a) * (grid.at(i, a) - m).exp() / dsum;
            c[i * n + a] += sigma / n as f64;
        }
        for &p in pos {
            c[i * n + p] -= 1.0 / (pos.len() as f64 * n as f64);
        }
    }
    let value = per_anchor.iter().sum::<f64>() / n as f64;
    // grad = (C + C^T) Z / tau
    let sym = tensor::add(&coef, &tensor::transpose(&coef).expect("square")).expect("same shape");
    let grad_z = tensor::mul_scalar(&tensor::matmul(&sym, z).expect("shapes agree"), 1.0 / tau);
    LossResult {
        value,
        grad_z,
        per_anchor,
    }
}

fn check_min_batch(batch: &EmbeddingBatch) -> Result<()> {
    if batch.n() < 4 {
        return Err(Error::contract(format!(
            "contrastive batch needs N >= 4 (one negative per anchor), got {}",
            batch.n()
        )));
    }
    Ok(())
}

/// Instance-discrimination loss over augmentation pairs: for each anchor the
/// positive is its paired view, the denominator runs over every other sample.
pub fn nce_loss(batch: &EmbeddingBatch, tau: Temperature) -> Result<LossResult> {
    check_min_batch(batch)?;
    let pairing = batch.require_pairing()?;
    let grid = SimGrid::within(batch.z(), tau.get());
    let positives: Vec<Vec<usize>> = pairing.iter().map(|&j| vec![j]).collect();
    Ok(weighted_contrast(
        batch.z(),
        &grid,
        tau.get(),
        |_, _| 1.0,
        &positives,
    ))
}

/// Per-anchor subject weights for the unimodal decomposition: the negative
/// set excludes the anchor and its positive.
pub fn q_weight(batch: &EmbeddingBatch, tau: Temperature) -> Result<QWeights> {
    let pairing = batch.require_pairing()?;
    let subjects = batch.subject_ids();
    let grid = SimGrid::within(batch.z(), tau.get());
    Ok(q_from_grid(
        &grid,
        |i, a| a != pairing[i],
        |i, a| subjects[a] == subjects[i],
    ))
}

/// Subject-invariant instance loss: same-subject negatives (excluding the
/// positive) are reweighted by `Q`.
pub fn sicl_loss(batch: &EmbeddingBatch, tau: Temperature) -> Result<LossResult> {
    sicl_loss_with_q(batch, tau, None)
}

/// [`sicl_loss`] with an override hook for the `Q` vector (used by the
/// reduction-lattice checks; `None` computes [`q_weight`]).
pub fn sicl_loss_with_q(
    batch: &EmbeddingBatch,
    tau: Temperature,
    q_override: Option<&[f64]>,
) -> Result<LossResult> {
    check_min_batch(batch)?;
    let pairing = batch.require_pairing()?;
    let subjects = batch.subject_ids();
    let grid = SimGrid::within(batch.z(), tau.get());
    let q_owned;
    let q: &[f64] = match q_override {
        Some(q) => {
            if q.len() != batch.n() {
                return Err(Error::contract("q override length mismatch"));
            }
            q
        }
        None => {
            q_owned = q_from_grid(
                &grid,
                |i, a| a != pairing[i],
                |i, a| subjects[a] == subjects[i],
            );
            &q_owned.q
        }
    };
    let positives: Vec<Vec<usize>> = pairing.iter().map(|&j| vec![j]).collect();
    Ok(weighted_contrast(
        batch.z(),
        &grid,
        tau.get(),
        |i, a| {
            if subjects[a] == subjects[i] && a != pairing[i] {
                q[i]
            } else {
                1.0
            }
        },
        &positives,
    ))
}

fn supervised_positives(batch: &EmbeddingBatch) -> Result<Vec<Vec<usize>>> {
    let labels = batch.require_labels()?;
    let n = batch.n();
    let mut positives = Vec::with_capacity(n);
    for i in 0..n {
        let p: Vec<usize> = (0..n).filter(|&a| a != i && labels[a] == labels[i]).collect();
        if p.is_empty() {
            return Err(Error::contract(format!(
                "supervised loss: class {} has a single sample (anchor {i} has no positives)",
                labels[i]
            )));
        }
        positives.push(p);
    }
    Ok(positives)
}

/// Supervised contrastive loss, `L_out` convention: the `1/|P(i)|` average
/// sits outside the log and the denominator runs over all other samples.
pub fn supcon_loss(batch: &EmbeddingBatch, tau: Temperature) -> Result<LossResult> {
    let positives = supervised_positives(batch)?;
    let grid = SimGrid::within(batch.z(), tau.get());
    Ok(weighted_contrast(
        batch.z(),
        &grid,
        tau.get(),
        |_, _| 1.0,
        &positives,
    ))
}

/// Subject-invariant supervised loss: the negative set is the different-label
/// samples; its same-subject subset is reweighted by `Q` computed over that
/// negative set. Positives are never reweighted.
pub fn si_supcon_loss(batch: &EmbeddingBatch, tau: Temperature) -> Result<LossResult> {
    si_supcon_loss_with_q(batch, tau, None)
}

/// [`si_supcon_loss`] with a `Q` override hook.
pub fn si_supcon_loss_with_q(
    batch: &EmbeddingBatch,
    tau: Temperature,
    q_override: Option<&[f64]>,
) -> Result<LossResult> {
    let positives = supervised_positives(batch)?;
    let labels = batch.require_labels()?;
    let subjects = batch.subject_ids();
    let grid = SimGrid::within(batch.z(), tau.get());
    let q_owned;
    let q: &[f64] = match q_override {
        Some(q) => {
            if q.len() != batch.n() {
                return Err(Error::contract("q override length mismatch"));
            }
            q
        }
        None => {
            q_owned = q_from_grid(
                &grid,
                |i, a| labels[a] != labels[i],
                |i, a| subjects[a] == subjects[i],
            );
            &q_owned.q
        }
    };
    Ok(weighted_contrast(
        batch.z(),
        &grid,
        tau.get(),
        |i, a| {
            if labels[a] != labels[i] && subjects[a] == subjects[i] {
                q[i]
            } else {
                1.0
            }
        },
        &positives,
    ))
}

fn check_aligned(batch_k: &EmbeddingBatch, batch_m: &EmbeddingBatch) -> Result<()> {
    if batch_k.n() != batch_m.n() {
        return Err(Error::contract(format!(
            "cross-modal batches must be index-aligned: {} vs {} rows",
            batch_k.n(),
            batch_m.n()
        )));
    }
    if batch_k.dim() != batch_m.dim() {
        return Err(Error::contract(format!(
            "cross-modal embeddings must share a dimension: {} vs {}",
            batch_k.dim(),
            batch_m.dim()
        )));
    }
    if batch_k.n() < 2 {
        return Err(Error::contract("cross-modal batch needs N >= 2"));
    }
    Ok(())
}

/// One anchoring direction of the cross-modal loss; candidates include the
/// positive at index `i`.
fn cmc_direction(
    grid: &SimGrid,
    weight: impl Fn(usize, usize) -> f64,
) -> (Vec<f64>, Tensor) {
    let n = grid.n;
    let mut per_anchor = Vec::with_capacity(n);
    let mut coef = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let m = grid.row_max(i, false);
        let mut dsum = 0.0;
        for a in 0..n {
            dsum += weight(i, a) * (grid.at(i, a) - m).exp();
        }
        per_anchor.push(m + dsum.ln() - grid.at(i, i));
        let c = coef.data_mut();
        for a in 0..n {
            let sigma = weight(i, a) * (grid.at(i, a) - m).exp() / dsum;
            c[i * n + a] += sigma / (2.0 * n as f64);
        }
        c[i * n + i] -= 1.0 / (2.0 * n as f64);
    }
    (per_anchor, coef)
}

/// Cross-modal contrastive loss, symmetric over both anchoring directions;
/// row `i` of each batch is the same session.
pub fn cmc_loss(
    batch_k: &EmbeddingBatch,
    batch_m: &EmbeddingBatch,
    tau: Temperature,
) -> Result<CmcLossResult> {
    cmc_core(batch_k, batch_m, tau, |_, _| 1.0, |_, _| 1.0)
}

/// Subject-invariant cross-modal loss: per direction, cross-modal negatives
/// sharing the anchor's subject are reweighted by a `Q` computed over that
/// direction's similarity grid.
pub fn si_cmc_loss(
    batch_k: &EmbeddingBatch,
    batch_m: &EmbeddingBatch,
    tau: Temperature,
) -> Result<CmcLossResult> {
    si_cmc_loss_with_q(batch_k, batch_m, tau, None, None)
}

/// [`si_cmc_loss`] with per-direction `Q` override hooks.
pub fn si_cmc_loss_with_q(
    batch_k: &EmbeddingBatch,
    batch_m: &EmbeddingBatch,
    tau: Temperature,
    q_km: Option<&[f64]>,
    q_mk: Option<&[f64]>,
) -> Result<CmcLossResult> {
    check_aligned(batch_k, batch_m)?;
    if batch_k.subject_ids() != batch_m.subject_ids() {
        return Err(Error::contract(
            "si_cmc: subject ids must be identical across the aligned batches",
        ));
    }
    let subjects = batch_k.subject_ids().to_vec();
    let tau_v = tau.get();
    let grid_km = SimGrid::across(batch_k.z(), batch_m.z(), tau_v)?;
    let grid_mk = SimGrid::across(batch_m.z(), batch_k.z(), tau_v)?;
    let same = |i: usize, a: usize| subjects[a] == subjects[i];
    let q_km = match q_km {
        Some(q) => q.to_vec(),
        None => q_from_grid(&grid_km, |i, a| a != i, same).q,
    };
    let q_mk = match q_mk {
        Some(q) => q.to_vec(),
        None => q_from_grid(&grid_mk, |i, a| a != i, same).q,
    };
    cmc_core(
        batch_k,
        batch_m,
        tau,
        move |i, a| if a != i && subjects[a] == subjects[i] { q_km[i] } else { 1.0 },
        {
            let subjects = batch_k.subject_ids().to_vec();
            move |i, a| if a != i && subjects[a] == subjects[i] { q_mk[i] } else { 1.0 }
        },
    )
}

fn cmc_core(
    batch_k: &EmbeddingBatch,
    batch_m: &EmbeddingBatch,
    tau: Temperature,
    weight_km: impl Fn(usize, usize) -> f64,
    weight_mk: impl Fn(usize, usize) -> f64,
) -> Result<CmcLossResult> {
    check_aligned(batch_k, batch_m)?;
    let n = batch_k.n();
    let tau_v = tau.get();
    let grid_km = SimGrid::across(batch_k.z(), batch_m.z(), tau_v)?;
    let grid_mk = SimGrid::across(batch_m.z(), batch_k.z(), tau_v)?;
    let (loss_km, coef_km) = cmc_direction(&grid_km, weight_km);
    let (loss_mk, coef_mk) = cmc_direction(&grid_mk, weight_mk);
    let value = (loss_km.iter().sum::<f64>() + loss_mk.iter().sum::<f64>()) / (2.0 * n as f64);

    let coef_mk_t = tensor::transpose(&coef_mk)?;
    let coef_km_t = tensor::transpose(&coef_km)?;
    let k_side = tensor::add(&coef_km, &coef_mk_t)?;
    let m_side = tensor::add(&coef_mk, &coef_km_t)?;
    let grad_k = tensor::mul_scalar(&tensor::matmul(&k_side, batch_m.z())?, 1.0 / tau_v);
    let grad_m = tensor::mul_scalar(&tensor::matmul(&m_side, batch_k.z())?, 1.0 / tau_v);
    Ok(CmcLossResult {
        value,
        grad_k,
        grad_m,
    })
}

/// Per-anchor diagnostics of the subject decomposition, for the debug CSV
/// dump: `p_i`, `Q_i` and the anchor's loss term.
#[derive(Debug, Clone)]
pub struct AnchorDiagnostics {
    pub anchor: usize,
    pub subject: u16,
    pub p: f64,
    pub q: f64,
    pub loss: f64,
}

pub fn sicl_diagnostics(batch: &EmbeddingBatch, tau: Temperature) -> Result<Vec<AnchorDiagnostics>> {
    let weights = q_weight(batch, tau)?;
    let result = sicl_loss_with_q(batch, tau, Some(&weights.q))?;
    Ok((0..batch.n())
        .map(|i| AnchorDiagnostics {
            anchor: i,
            subject: batch.subject_ids()[i],
            p: weights.p[i],
            q: weights.q[i],
            loss: result.per_anchor[i],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: Vec<Vec<f64>>) -> Tensor {
        let n = rows.len();
        let d = rows[0].len();
        let mut data = Vec::with_capacity(n * d);
        for row in rows {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(row.iter().map(|v| v / norm));
        }
        Tensor::from_vec(vec![n, d], data).unwrap()
    }

    fn pairs(n: usize) -> Vec<usize> {
        (0..n).map(|i| if i % 2 == 0 { i + 1 } else { i - 1 }).collect()
    }

    #[test]
    fn nce_all_identical_is_log3() {
        let z = unit_rows(vec![vec![1.0, 0.0]; 4]);
        let batch = EmbeddingBatch::new(z, vec![0; 4], None, Some(pairs(4))).unwrap();
        let out = nce_loss(&batch, Temperature::new(1.0).unwrap()).unwrap();
        assert!((out.value - 3.0f64.ln()).abs() < 1e-12);
        for l in &out.per_anchor {
            assert!((l - 3.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn nce_orthogonal_negatives_closed_form() {
        // positive identical to the anchor, both negatives orthogonal:
        // per-anchor loss = -ln(e / (e + 2))
        let z = unit_rows(vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ]);
        let batch = EmbeddingBatch::new(z, vec![0, 0, 1, 1], None, Some(pairs(4))).unwrap();
        let out = nce_loss(&batch, Temperature::new(1.0).unwrap()).unwrap();
        let e = std::f64::consts::E;
        let expect = -(e / (e + 2.0)).ln();
        assert!((out.value - expect).abs() < 1e-12, "{}", out.value);
    }

    #[test]
    fn nce_needs_a_negative() {
        let z = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let batch = EmbeddingBatch::new(z, vec![0, 0], None, Some(pairs(2))).unwrap();
        assert!(matches!(
            nce_loss(&batch, Temperature::new(1.0).unwrap()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn q_is_one_when_all_share_a_subject() {
        let z = unit_rows(vec![
            vec![1.0, 0.2],
            vec![0.9, -0.1],
            vec![-0.3, 1.0],
            vec![0.2, 0.8],
        ]);
        let batch = EmbeddingBatch::new(z, vec![5; 4], None, Some(pairs(4))).unwrap();
        let w = q_weight(&batch, Temperature::new(0.5).unwrap()).unwrap();
        assert!(!w.degenerate);
        for (p, q) in w.p.iter().zip(&w.q) {
            assert!((p - 1.0).abs() < 1e-12);
            assert!((q - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn q_falls_back_when_every_subject_is_unique() {
        let z = unit_rows(vec![
            vec![1.0, 0.0],
            vec![0.8, 0.6],
            vec![0.0, 1.0],
            vec![-0.6, 0.8],
        ]);
        let batch = EmbeddingBatch::new(z, vec![0, 1, 2, 3], None, Some(pairs(4))).unwrap();
        let w = q_weight(&batch, Temperature::new(0.5).unwrap()).unwrap();
        assert!(w.degenerate);
        assert_eq!(w.q, vec![1.0; 4]);
        assert_eq!(w.p, vec![0.0; 4]);
    }

    #[test]
    fn q_mean_is_one_and_orders_subject_pressure() {
        // subject 0 anchors sit close to their same-subject negatives,
        // subject 1 anchors sit far from theirs
        let z = unit_rows(vec![
            vec![1.0, 0.05, 0.0],
            vec![1.0, -0.05, 0.0],
            vec![0.95, 0.3, 0.05],
            vec![0.95, -0.3, 0.05],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.1],
            vec![0.0, -0.9, 1.0],
            vec![0.1, -0.9, 1.0],
        ]);
        let subjects = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let batch = EmbeddingBatch::new(z, subjects, None, Some(pairs(8))).unwrap();
        let w = q_weight(&batch, Temperature::new(0.5).unwrap()).unwrap();
        let mean: f64 = w.q.iter().sum::<f64>() / 8.0;
        assert!((mean - 1.0).abs() < 1e-12);
        for i in 0..4 {
            assert!(w.q[i] > 1.0, "subject-0 anchor {i}: q = {}", w.q[i]);
        }
        for i in 4..8 {
            assert!(w.q[i] < 1.0, "subject-1 anchor {i}: q = {}", w.q[i]);
        }
    }

    #[test]
    fn sicl_with_unit_q_equals_nce() {
        let z = unit_rows(vec![
            vec![0.9, 0.1, 0.3],
            vec![0.8, 0.2, 0.1],
            vec![-0.2, 1.0, 0.0],
            vec![0.1, 0.9, -0.4],
            vec![0.3, -0.2, 1.0],
            vec![0.0, 0.1, 0.9],
        ]);
        let batch =
            EmbeddingBatch::new(z, vec![0, 0, 1, 1, 2, 2], None, Some(pairs(6))).unwrap();
        let tau = Temperature::new(0.2).unwrap();
        let ones = vec![1.0; 6];
        let sicl = sicl_loss_with_q(&batch, tau, Some(&ones)).unwrap();
        let nce = nce_loss(&batch, tau).unwrap();
        assert!((sicl.value - nce.value).abs() < 1e-12);
        for (a, b) in sicl.grad_z.data().iter().zip(nce.grad_z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sicl_single_subject_batch_equals_nce() {
        let z = unit_rows(vec![
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![-0.2, 1.0],
            vec![0.1, 0.9],
        ]);
        let batch = EmbeddingBatch::new(z, vec![7; 4], None, Some(pairs(4))).unwrap();
        let tau = Temperature::new(0.1).unwrap();
        let sicl = sicl_loss(&batch, tau).unwrap();
        let nce = nce_loss(&batch, tau).unwrap();
        assert!((sicl.value - nce.value).abs() < 1e-12);
    }

    #[test]
    fn sicl_exceeds_nce_under_subject_pressure() {
        // same-subject negatives strictly more similar than cross-subject
        // ones for every anchor, with very unequal pressure across subjects
        let z = unit_rows(vec![
            vec![1.0, 0.02, 0.0],
            vec![1.0, -0.02, 0.0],
            vec![0.98, 0.2, 0.0],
            vec![0.98, -0.2, 0.0],
            vec![-0.8, 1.0, 0.3],
            vec![-0.8, 1.0, 0.35],
            vec![-0.8, 0.6, -1.0],
            vec![-0.75, 0.6, -1.0],
        ]);
        let subjects = vec![0, 0, 0, 0, 1, 1, 1, 1];
        let batch = EmbeddingBatch::new(z, subjects, None, Some(pairs(8))).unwrap();
        let tau = Temperature::new(0.5).unwrap();
        let w = q_weight(&batch, tau).unwrap();
        for i in 0..4 {
            assert!(w.q[i] > 1.0, "close-knit subject should be upweighted");
        }
        let sicl = sicl_loss(&batch, tau).unwrap();
        let nce = nce_loss(&batch, tau).unwrap();
        assert!(
            sicl.value > nce.value,
            "sicl {} vs nce {}",
            sicl.value,
            nce.value
        );
    }

    #[test]
    fn supcon_singleton_classes_equal_nce() {
        let z = unit_rows(vec![
            vec![0.9, 0.1, 0.0],
            vec![0.8, 0.3, 0.1],
            vec![-0.2, 1.0, 0.2],
            vec![0.1, 0.9, -0.1],
            vec![0.3, -0.2, 1.0],
            vec![0.1, 0.0, 0.9],
        ]);
        // labels coincide with the augmentation pairing
        let labels = vec![0, 0, 1, 1, 2, 2];
        let batch =
            EmbeddingBatch::new(z, vec![0, 1, 2, 0, 1, 2], Some(labels), Some(pairs(6))).unwrap();
        let tau = Temperature::new(0.3).unwrap();
        let sup = supcon_loss(&batch, tau).unwrap();
        let nce = nce_loss(&batch, tau).unwrap();
        assert!((sup.value - nce.value).abs() < 1e-12);
        for (a, b) in sup.grad_z.data().iter().zip(nce.grad_z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn supcon_identical_single_class_is_log_n_minus_1() {
        let n = 5;
        let z = unit_rows(vec![vec![0.6, 0.8]; n]);
        let batch = EmbeddingBatch::new(z, vec![0; n], Some(vec![3; n]), None).unwrap();
        let out = supcon_loss(&batch, Temperature::new(0.7).unwrap()).unwrap();
        assert!((out.value - ((n - 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn supcon_empty_positive_set_names_the_class() {
        let z = unit_rows(vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.7, 0.7],
            vec![0.7, -0.7],
        ]);
        let batch = EmbeddingBatch::new(z, vec![0; 4], Some(vec![1, 1, 9, 1]), None).unwrap();
        let err = supcon_loss(&batch, Temperature::new(1.0).unwrap()).unwrap_err();
        assert!(err.to_string().contains("class 9"), "{err}");
    }

    #[test]
    fn si_supcon_with_unit_q_equals_supcon() {
        let z = unit_rows(vec![
            vec![0.9, 0.1, 0.2],
            vec![0.7, 0.4, 0.1],
            vec![-0.2, 1.0, 0.3],
            vec![0.1, 0.8, -0.2],
            vec![0.4, -0.1, 1.0],
            vec![0.2, 0.1, 0.8],
        ]);
        let labels = vec![0, 0, 1, 1, 0, 1];
        let subjects = vec![0, 1, 0, 1, 2, 2];
        let batch = EmbeddingBatch::new(z, subjects, Some(labels), None).unwrap();
        let tau = Temperature::new(0.4).unwrap();
        let ones = vec![1.0; 6];
        let si = si_supcon_loss_with_q(&batch, tau, Some(&ones)).unwrap();
        let sup = supcon_loss(&batch, tau).unwrap();
        assert!((si.value - sup.value).abs() < 1e-12);
        for (a, b) in si.grad_z.data().iter().zip(sup.grad_z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn si_supcon_unique_subjects_equals_supcon() {
        let z = unit_rows(vec![
            vec![0.9, 0.1],
            vec![0.7, 0.4],
            vec![-0.2, 1.0],
            vec![0.1, 0.8],
        ]);
        let batch =
            EmbeddingBatch::new(z, vec![0, 1, 2, 3], Some(vec![0, 0, 1, 1]), None).unwrap();
        let tau = Temperature::new(0.4).unwrap();
        let si = si_supcon_loss(&batch, tau).unwrap();
        let sup = supcon_loss(&batch, tau).unwrap();
        assert!((si.value - sup.value).abs() < 1e-12);
    }

    #[test]
    fn cmc_orthogonal_rows_closed_form() {
        let n = 4;
        let mut rows = Vec::new();
        for i in 0..n {
            let mut r = vec![0.0; n];
            r[i] = 1.0;
            rows.push(r);
        }
        let z = unit_rows(rows);
        let bk = EmbeddingBatch::new(z.clone(), vec![0; n], None, None).unwrap();
        let bm = EmbeddingBatch::new(z, vec![0; n], None, None).unwrap();
        let tau = 0.5;
        let out = cmc_loss(&bk, &bm, Temperature::new(tau).unwrap()).unwrap();
        let e = (1.0f64 / tau).exp();
        let expect = -(e / (e + (n - 1) as f64)).ln();
        assert!((out.value - expect).abs() < 1e-12);
    }

    #[test]
    fn cmc_two_sessions_hand_computation() {
        let zk = unit_rows(vec![vec![1.0, 0.0], vec![0.6, 0.8]]);
        let zm = unit_rows(vec![vec![0.8, 0.6], vec![0.0, 1.0]]);
        let bk = EmbeddingBatch::new(zk.clone(), vec![0, 1], None, None).unwrap();
        let bm = EmbeddingBatch::new(zm.clone(), vec![0, 1], None, None).unwrap();
        let tau = 1.0;
        let out = cmc_loss(&bk, &bm, Temperature::new(tau).unwrap()).unwrap();
        // by hand over both directions
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for i in 0..2 {
            let num = dot(zk.row(i), zm.row(i)).exp();
            let den: f64 = (0..2).map(|a| dot(zk.row(i), zm.row(a)).exp()).sum();
            total += -(num / den).ln();
            let num = dot(zm.row(i), zk.row(i)).exp();
            let den: f64 = (0..2).map(|a| dot(zm.row(i), zk.row(a)).exp()).sum();
            total += -(num / den).ln();
        }
        assert!((out.value - total / 4.0).abs() < 1e-12);
    }

    #[test]
    fn cmc_length_mismatch_is_contract_error() {
        let zk = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let zm = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let bk = EmbeddingBatch::new(zk, vec![0, 1], None, None).unwrap();
        let bm = EmbeddingBatch::new(zm, vec![0, 1, 2], None, None).unwrap();
        assert!(matches!(
            cmc_loss(&bk, &bm, Temperature::new(1.0).unwrap()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn si_cmc_with_unit_q_equals_cmc() {
        let zk = unit_rows(vec![
            vec![0.9, 0.2],
            vec![0.1, 1.0],
            vec![0.8, -0.4],
            vec![-0.5, 0.9],
        ]);
        let zm = unit_rows(vec![
            vec![1.0, 0.1],
            vec![0.2, 0.9],
            vec![0.7, -0.5],
            vec![-0.4, 1.0],
        ]);
        let subjects = vec![0, 0, 1, 1];
        let bk = EmbeddingBatch::new(zk, subjects.clone(), None, None).unwrap();
        let bm = EmbeddingBatch::new(zm, subjects, None, None).unwrap();
        let tau = Temperature::new(0.3).unwrap();
        let ones = vec![1.0; 4];
        let si = si_cmc_loss_with_q(&bk, &bm, tau, Some(&ones), Some(&ones)).unwrap();
        let cmc = cmc_loss(&bk, &bm, tau).unwrap();
        assert!((si.value - cmc.value).abs() < 1e-12);
        for (a, b) in si.grad_k.data().iter().zip(cmc.grad_k.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in si.grad_m.data().iter().zip(cmc.grad_m.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn si_cmc_unique_subjects_equals_cmc() {
        let zk = unit_rows(vec![vec![0.9, 0.2], vec![0.1, 1.0], vec![0.8, -0.4]]);
        let zm = unit_rows(vec![vec![1.0, 0.1], vec![0.2, 0.9], vec![0.7, -0.5]]);
        let bk = EmbeddingBatch::new(zk, vec![0, 1, 2], None, None).unwrap();
        let bm = EmbeddingBatch::new(zm, vec![0, 1, 2], None, None).unwrap();
        let tau = Temperature::new(0.3).unwrap();
        let si = si_cmc_loss(&bk, &bm, tau).unwrap();
        let cmc = cmc_loss(&bk, &bm, tau).unwrap();
        assert!((si.value - cmc.value).abs() < 1e-12);
    }

    #[test]
    fn losses_sharpen_as_temperature_drops_when_positives_lead() {
        // positives strictly most similar for every anchor
        let z = unit_rows(vec![
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let subjects = vec![0, 1, 0, 1, 0, 1];
        let labels = vec![0, 0, 1, 1, 2, 2];
        let batch = EmbeddingBatch::new(
            z.clone(),
            subjects.clone(),
            Some(labels),
            Some(pairs(6)),
        )
        .unwrap();
        let bk = EmbeddingBatch::new(z.clone(), subjects.clone(), None, None).unwrap();
        let bm = EmbeddingBatch::new(z, subjects, None, None).unwrap();
        let grid = [1.0, 0.5, 0.1];
        let mut prev = [f64::INFINITY; 6];
        for tau in grid {
            let tau = Temperature::new(tau).unwrap();
            let values = [
                nce_loss(&batch, tau).unwrap().value,
                sicl_loss(&batch, tau).unwrap().value,
                supcon_loss(&batch, tau).unwrap().value,
                si_supcon_loss(&batch, tau).unwrap().value,
                cmc_loss(&bk, &bm, tau).unwrap().value,
                si_cmc_loss(&bk, &bm, tau).unwrap().value,
            ];
            for (v, p) in values.iter().zip(&prev) {
                assert!(*v <= *p + 1e-12, "{values:?} after {prev:?}");
            }
            prev = values;
        }
    }

    #[test]
    fn loss_values_are_finite_and_nonnegative() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, crate::rng::Domain::Init, 99);
        for _ in 0..20 {
            let n = 8;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let z = unit_rows(rows);
            let subjects: Vec<u16> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let labels: Vec<u16> = (0..n as usize)
                .map(|i| if i % 2 == 0 { rng.gen_range(0..2) } else { 0 })
                .collect();
            // pair i with i+1 and give pairs a shared label so P(i) is nonempty
            let labels: Vec<u16> = (0..n).map(|i| labels[i / 2 * 2]).collect();
            let batch =
                EmbeddingBatch::new(z, subjects, Some(labels), Some(pairs(n))).unwrap();
            let tau = Temperature::new(0.2).unwrap();
            for value in [
                nce_loss(&batch, tau).unwrap().value,
                sicl_loss(&batch, tau).unwrap().value,
                supcon_loss(&batch, tau).unwrap().value,
                si_supcon_loss(&batch, tau).unwrap().value,
            ] {
                assert!(value.is_finite() && value >= 0.0, "got {value}");
            }
        }
    }

    #[test]
    fn batch_rejects_non_unit_rows_and_bad_pairings() {
        let z = Tensor::from_vec(vec![2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(EmbeddingBatch::new(z, vec![0, 0], None, None).is_err());
        let z = unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(EmbeddingBatch::new(z.clone(), vec![0, 0], None, Some(vec![0, 1])).is_err());
        assert!(EmbeddingBatch::new(z, vec![0], None, None).is_err());
    }
}
