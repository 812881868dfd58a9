//! The three training losses and their combination.
//!
//! - gene-image contrastive: softmax over cosine similarities with image rows
//!   as anchors and gene rows as candidates, temperature-scaled, pulling each
//!   matched pair together;
//! - cross-modal ranking consistency: for anchor p and spots q, r, the
//!   sign-rewritten residual
//!   `ℓ(p,q,r) = sign(S^G_pq − S^G_pr)·[(S^G_pq − S^G_pr) − (S^I_pq − S^I_pr)]`
//!   is pushed non-positive through a hinge, either over all triplets or over
//!   the cyclic O(N) pair sample per anchor;
//! - intra-modal distillation: mean-reduced softmax consistency between
//!   teacher embeddings of weak augmentations and student embeddings of
//!   strong augmentations.
//!
//! All gradients here are with respect to the inputs actually passed in:
//! embedding rows for the softmax losses, similarity-matrix entries for the
//! ranking losses. Hinge subgradients at the kink are 0, and `sign(0) = 0` so
//! exactly-tied gene similarities contribute nothing.

use crate::encoders::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::rng::stream_rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// N×N block of cosine similarities, entries clamped to [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.values[(p, q)]
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Wraps a square matrix of similarities. Entries may overshoot [−1, 1]
    /// by at most 1e−6 (rounding, finite-difference probes) and are clamped.
    pub fn from_matrix(values: Matrix) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::shape(
                "SimilarityMatrix",
                "square matrix".to_string(),
                format!("{}x{}", values.rows(), values.cols()),
            ));
        }
        if values.data().iter().any(|v| v.abs() > 1.0 + 1e-6) {
            return Err(Error::Validation(
                "similarity entries must lie in [-1, 1]".into(),
            ));
        }
        Ok(SimilarityMatrix {
            values: values.map(|v| v.clamp(-1.0, 1.0)),
        })
    }
}

/// How a batch loss is reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Margin used by the ranking losses: the gene similarity gap itself, or the
/// classic fixed positive margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    GeneGap,
    Fixed(f64),
}

/// Weights and shape of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature for both contrastive and distillation losses.
    pub tau: f64,
    /// Weight of the ranking consistency loss.
    pub lambda1: f64,
    /// Weight of the distillation loss.
    pub lambda2: f64,
    pub reduction: Reduction,
    pub margin_mode: MarginMode,
    /// When set, ranking gradients stop at the gene similarity matrix so the
    /// ranking loss shapes only image features.
    pub detach_gene_sims: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            lambda1: 5.0,
            lambda2: 1.0,
            reduction: Reduction::Sum,
            margin_mode: MarginMode::GeneGap,
            detach_gene_sims: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config(format!(
                "lambda1/lambda2 must be >= 0, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if let MarginMode::Fixed(eps) = self.margin_mode {
            if !(eps > 0.0) {
                return Err(Error::Config(format!(
                    "fixed margin must be > 0, got {eps}"
                )));
            }
        }
        Ok(())
    }
}

/// Cosine similarities between two unit-row batches: entry (p, q) is
/// `dot(a_p, b_q)`, clamped to [−1, 1] against rounding.
pub fn cosine_sim_matrix(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<SimilarityMatrix> {
    a.require_nondegenerate()?;
    b.require_nondegenerate()?;
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "cosine_sim_matrix",
            format!("dim {}", a.dim()),
            format!("dim {}", b.dim()),
        ));
    }
    if a.n() != b.n() {
        return Err(Error::shape(
            "cosine_sim_matrix",
            format!("{} rows", a.n()),
            format!("{} rows", b.n()),
        ));
    }
    let values = a
        .matrix()
        .matmul_transpose(b.matrix())?
        .map(|v| v.clamp(-1.0, 1.0));
    SimilarityMatrix::from_matrix(values)
}

/// A softmax alignment loss with its input gradients.
#[derive(Debug, Clone)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient w.r.t. the image embedding rows.
    pub d_image: Matrix,
    /// Gradient w.r.t. the gene embedding rows.
    pub d_gene: Matrix,
}

/// Gene-image contrastive loss: image rows are anchors, gene rows candidates;
/// each anchor's matched gene is the positive. Computed with a max-shifted
/// log-sum-exp; `reduction = Mean` divides by N.
pub fn gene_image_contrastive(
    img: &EmbeddingBatch,
    gene: &EmbeddingBatch,
    cfg: &LossConfig,
) -> Result<ContrastiveOutput> {
    let (loss, d_anchor, d_candidate) =
        softmax_alignment(img, gene, cfg.tau, cfg.reduction, "gene_image_contrastive")?;
    Ok(ContrastiveOutput {
        loss,
        d_image: d_anchor,
        d_gene: d_candidate,
    })
}

/// Distillation loss with its student gradient. The teacher block is
/// gradient-free by contract.
#[derive(Debug, Clone)]
pub struct DistillationOutput {
    pub loss: f64,
    pub d_student: Matrix,
}

/// Intra-modal consistency between teacher embeddings of weakly augmented
/// images (anchors) and student embeddings of strongly augmented images
/// (candidates). Always mean-reduced, regardless of `cfg.reduction`.
pub fn distillation_loss(
    teacher_weak: &EmbeddingBatch,
    student_strong: &EmbeddingBatch,
    cfg: &LossConfig,
) -> Result<DistillationOutput> {
    let (loss, _, d_student) = softmax_alignment(
        teacher_weak,
        student_strong,
        cfg.tau,
        Reduction::Mean,
        "distillation_loss",
    )?;
    Ok(DistillationOutput { loss, d_student })
}

/// Shared InfoNCE-style core: anchors index rows, candidates index the
/// softmax support; positives sit on the diagonal.
fn softmax_alignment(
    anchors: &EmbeddingBatch,
    candidates: &EmbeddingBatch,
    tau: f64,
    reduction: Reduction,
    context: &'static str,
) -> Result<(f64, Matrix, Matrix)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("{context}: tau must be > 0, got {tau}")));
    }
    anchors.require_nondegenerate()?;
    candidates.require_nondegenerate()?;
    let n = anchors.n();
    if n < 2 {
        return Err(Error::Validation(format!(
            "{context}: need at least 2 rows, got {n}"
        )));
    }
    if candidates.n() != n || candidates.dim() != anchors.dim() {
        return Err(Error::shape(
            context,
            format!("{}x{}", n, anchors.dim()),
            format!("{}x{}", candidates.n(), candidates.dim()),
        ));
    }

    let logits = anchors.matrix().matmul_transpose(candidates.matrix())?;
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n as f64,
    };
    let mut loss = 0.0;
    let mut d_anchor = Matrix::zeros(n, anchors.dim());
    let mut d_candidate = Matrix::zeros(n, anchors.dim());
    for p in 0..n {
        let row: Vec<f64> = logits.row(p).iter().map(|s| s / tau).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
        loss += scale * (lse - row[p]);
        for q in 0..n {
            let softmax = (row[q] - lse).exp();
            let d_logit = scale * (softmax - if q == p { 1.0 } else { 0.0 }) / tau;
            if d_logit == 0.0 {
                continue;
            }
            for (dv, cv) in d_anchor.row_mut(p).iter_mut().zip(candidates.row(q)) {
                *dv += d_logit * cv;
            }
            for (dv, av) in d_candidate.row_mut(q).iter_mut().zip(anchors.row(p)) {
                *dv += d_logit * av;
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            component: context.to_string(),
        });
    }
    Ok((loss, d_anchor, d_candidate))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The sign-rewritten ranking residual
/// `ℓ(p,q,r) = sign(ΔG)·(ΔG − ΔI)` with `ΔG = S^G_pq − S^G_pr` and
/// `ΔI = S^I_pq − S^I_pr`; `sign(0) = 0`.
pub fn ranking_residual(
    sim_gene: &SimilarityMatrix,
    sim_image: &SimilarityMatrix,
    p: usize,
    q: usize,
    r: usize,
) -> Result<f64> {
    let n = sim_gene.n();
    if sim_image.n() != n {
        return Err(Error::shape(
            "ranking_residual",
            format!("{n}x{n}"),
            format!("{0}x{0}", sim_image.n()),
        ));
    }
    if p == q || p == r || q == r || p >= n || q >= n || r >= n {
        return Err(Error::Validation(format!(
            "indices must be distinct and < {n}, got ({p}, {q}, {r})"
        )));
    }
    let dg = sim_gene.get(p, q) - sim_gene.get(p, r);
    let di = sim_image.get(p, q) - sim_image.get(p, r);
    Ok(sign(dg) * (dg - di))
}

/// A ranking loss value and its subgradients w.r.t. similarity entries.
///
/// The sign factor is treated as a constant during differentiation, so gene
/// gradients flow only through the bracketed gap term; `d_gene_sims` is what a
/// caller applies when gene similarities are not detached.
#[derive(Debug, Clone)]
pub struct RankingOutput {
    pub loss: f64,
    pub d_image_sims: Matrix,
    pub d_gene_sims: Matrix,
}

struct RankingAccumulator {
    loss: f64,
    d_image: Matrix,
    d_gene: Matrix,
}

impl RankingAccumulator {
    fn new(n: usize) -> Self {
        RankingAccumulator {
            loss: 0.0,
            d_image: Matrix::zeros(n, n),
            d_gene: Matrix::zeros(n, n),
        }
    }

    fn add_triplet(&mut self, sg: &SimilarityMatrix, si: &SimilarityMatrix, p: usize, q: usize, r: usize) {
        let dg = sg.get(p, q) - sg.get(p, r);
        let di = si.get(p, q) - si.get(p, r);
        let s = sign(dg);
        let residual = s * (dg - di);
        if residual > 0.0 {
            self.loss += residual;
            self.d_image[(p, q)] -= s;
            self.d_image[(p, r)] += s;
            self.d_gene[(p, q)] += s;
            self.d_gene[(p, r)] -= s;
        }
    }

    fn finish(mut self, denom: f64) -> RankingOutput {
        if denom != 1.0 {
            self.loss /= denom;
            for v in self.d_image.data_mut() {
                *v /= denom;
            }
            for v in self.d_gene.data_mut() {
                *v /= denom;
            }
        }
        RankingOutput {
            loss: self.loss,
            d_image_sims: self.d_image,
            d_gene_sims: self.d_gene,
        }
    }
}

fn check_same_n(sg: &SimilarityMatrix, si: &SimilarityMatrix, context: &'static str) -> Result<usize> {
    if sg.n() != si.n() {
        return Err(Error::shape(
            context,
            format!("{0}x{0}", sg.n()),
            format!("{0}x{0}", si.n()),
        ));
    }
    Ok(sg.n())
}

/// Full O(N³) ranking loss: hinge of the residual over every ordered triplet
/// (p, q≠p, r≠p,q). `reduction = Mean` divides by n(n−1)(n−2).
pub fn ranking_loss_full(
    sim_gene: &SimilarityMatrix,
    sim_image: &SimilarityMatrix,
    cfg: &LossConfig,
) -> Result<RankingOutput> {
    let n = check_same_n(sim_gene, sim_image, "ranking_loss_full")?;
    if n < 3 {
        return Err(Error::Validation(format!(
            "ranking loss needs at least 3 spots, got {n}"
        )));
    }
    let mut acc = RankingAccumulator::new(n);
    for p in 0..n {
        for q in 0..n {
            if q == p {
                continue;
            }
            for r in 0..n {
                if r == p || r == q {
                    continue;
                }
                acc.add_triplet(sim_gene, sim_image, p, q, r);
            }
        }
    }
    let denom = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => (n * (n - 1) * (n - 2)) as f64,
    };
    Ok(acc.finish(denom))
}

/// Per-anchor (q, r) pairs from the cyclic sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletPairing {
    pub anchor: usize,
    pub pairs: Vec<(usize, usize)>,
}

/// Cyclic pair sampler for one anchor: shuffle the other n−1 indices, take
/// consecutive pairs, and close the cycle by pairing the last with the first.
/// Emits exactly n−1 pairs with every non-anchor index in exactly two of them.
pub fn sample_pairings(n: usize, anchor: usize, rng_seed: u64) -> Result<TripletPairing> {
    if n < 3 {
        return Err(Error::Validation(format!(
            "pair sampling needs at least 3 spots, got {n}"
        )));
    }
    if anchor >= n {
        return Err(Error::Validation(format!(
            "anchor {anchor} out of range for {n} spots"
        )));
    }
    let mut others: Vec<usize> = (0..n).filter(|&i| i != anchor).collect();
    others.shuffle(&mut stream_rng(rng_seed, &[anchor as u64]));
    let mut pairs = Vec::with_capacity(n - 1);
    for window in others.windows(2) {
        pairs.push((window[0], window[1]));
    }
    pairs.push((others[others.len() - 1], others[0]));
    Ok(TripletPairing { anchor, pairs })
}

fn check_pairings(pairings: &[TripletPairing], n: usize) -> Result<()> {
    if pairings.len() != n {
        return Err(Error::Validation(format!(
            "expected one pairing per anchor ({n}), got {}",
            pairings.len()
        )));
    }
    for (p, pairing) in pairings.iter().enumerate() {
        if pairing.anchor != p {
            return Err(Error::Validation(format!(
                "pairing {p} carries anchor {}",
                pairing.anchor
            )));
        }
        for &(q, r) in &pairing.pairs {
            if q >= n || r >= n || q == p || r == p || q == r {
                return Err(Error::Validation(format!(
                    "invalid pair ({q}, {r}) for anchor {p} of {n}"
                )));
            }
        }
    }
    Ok(())
}

/// Sampled ranking loss over the cyclic pairs, O(N²) triplets total.
/// `reduction = Mean` divides by n(n−1).
pub fn ranking_loss_sampled(
    sim_gene: &SimilarityMatrix,
    sim_image: &SimilarityMatrix,
    pairings: &[TripletPairing],
    cfg: &LossConfig,
) -> Result<RankingOutput> {
    let n = check_same_n(sim_gene, sim_image, "ranking_loss_sampled")?;
    if n < 3 {
        return Err(Error::Validation(format!(
            "ranking loss needs at least 3 spots, got {n}"
        )));
    }
    check_pairings(pairings, n)?;
    let mut acc = RankingAccumulator::new(n);
    for pairing in pairings {
        for &(q, r) in &pairing.pairs {
            acc.add_triplet(sim_gene, sim_image, pairing.anchor, q, r);
        }
    }
    let denom = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => (n * (n - 1)) as f64,
    };
    Ok(acc.finish(denom))
}

/// Classic fixed-margin ordinal baseline over the same sampled triplets:
/// `max{0, ε − sign(ΔG)·ΔI}` per triplet. Comparison baseline only; no
/// gradients are produced.
pub fn classic_margin_loss(
    sim_gene: &SimilarityMatrix,
    sim_image: &SimilarityMatrix,
    epsilon: f64,
    pairings: &[TripletPairing],
    cfg: &LossConfig,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("margin must be > 0, got {epsilon}")));
    }
    let n = check_same_n(sim_gene, sim_image, "classic_margin_loss")?;
    if n < 3 {
        return Err(Error::Validation(format!(
            "ranking loss needs at least 3 spots, got {n}"
        )));
    }
    check_pairings(pairings, n)?;
    let mut loss = 0.0;
    for pairing in pairings {
        let p = pairing.anchor;
        for &(q, r) in &pairing.pairs {
            let dg = sim_gene.get(p, q) - sim_gene.get(p, r);
            let di = sim_image.get(p, q) - sim_image.get(p, r);
            loss += (epsilon - sign(dg) * di).max(0.0);
        }
    }
    Ok(match cfg.reduction {
        Reduction::Sum => loss,
        Reduction::Mean => loss / (n * (n - 1)) as f64,
    })
}

/// The three component values entering the total.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub contrastive: f64,
    pub rank: f64,
    pub distil: f64,
}

/// Weighted total: `contrastive + λ₁·rank + λ₂·distil`.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> Result<f64> {
    for (name, v) in [
        ("contrastive", parts.contrastive),
        ("rank", parts.rank),
        ("distil", parts.distil),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                component: format!("total_loss: {name} part"),
            });
        }
    }
    Ok(parts.contrastive + cfg.lambda1 * parts.rank + cfg.lambda2 * parts.distil)
}
