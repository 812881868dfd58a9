//! Evaluation suite: per-gene PCC aggregation, MAE, MSE, rank accuracy,
//! distance-correlation R², K-means, and the v-score.

use crate::encoders::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::numcore::{dot, Matrix};
use crate::rng::stream_rng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use std::collections::HashMap;

/// Default number of rank-accuracy trials.
pub const DEFAULT_RANK_TRIALS: usize = 8;
/// Default number of spot pairs for the distance-correlation fit.
pub const DEFAULT_R2_PAIRS: usize = 100;
/// Re-draws allowed per rank-accuracy trial before the trial is skipped.
const RANK_TIE_RETRIES: u64 = 8;

/// Flat JSON report for a gene-prediction evaluation. Keys: `pcc`, `mae`,
/// `mse`, `skipped_genes`, `per_gene_pcc`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub pcc: f64,
    pub mae: f64,
    pub mse: f64,
    pub skipped_genes: usize,
    pub per_gene_pcc: Vec<f64>,
}

fn check_same_shape(y: &Matrix, yhat: &Matrix, context: &'static str) -> Result<()> {
    if y.rows() != yhat.rows() || y.cols() != yhat.cols() {
        return Err(Error::shape(
            context,
            format!("{}x{}", y.rows(), y.cols()),
            format!("{}x{}", yhat.rows(), yhat.cols()),
        ));
    }
    Ok(())
}

fn column(m: &Matrix, j: usize) -> Vec<f64> {
    (0..m.rows()).map(|i| m[(i, j)]).collect()
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Pearson correlation per gene over spots, averaged over genes.
///
/// Genes whose true or predicted column is constant are skipped (the
/// correlation is undefined there) and counted. Returns
/// `(overall, per_gene, skipped)`; skipped genes carry NaN in `per_gene`.
pub fn pcc(y: &Matrix, yhat: &Matrix) -> Result<(f64, Vec<f64>, usize)> {
    check_same_shape(y, yhat, "pcc")?;
    if y.rows() < 2 {
        return Err(Error::Validation(format!(
            "pcc needs at least 2 spots, got {}",
            y.rows()
        )));
    }
    let n = y.rows() as f64;
    let mut per_gene = Vec::with_capacity(y.cols());
    let mut total = 0.0;
    let mut used = 0usize;
    for j in 0..y.cols() {
        let a = column(y, j);
        let b = column(yhat, j);
        if is_constant(&a) || is_constant(&b) {
            per_gene.push(f64::NAN);
            continue;
        }
        let mean_a = a.iter().sum::<f64>() / n;
        let mean_b = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut var_a = 0.0;
        let mut var_b = 0.0;
        for (x, z) in a.iter().zip(&b) {
            cov += (x - mean_a) * (z - mean_b);
            var_a += (x - mean_a) * (x - mean_a);
            var_b += (z - mean_b) * (z - mean_b);
        }
        let r = cov / (var_a.sqrt() * var_b.sqrt());
        per_gene.push(r);
        total += r;
        used += 1;
    }
    let skipped = y.cols() - used;
    let overall = if used == 0 { 0.0 } else { total / used as f64 };
    Ok((overall, per_gene, skipped))
}

/// Mean absolute difference over all n·m entries.
pub fn mae(y: &Matrix, yhat: &Matrix) -> Result<f64> {
    check_same_shape(y, yhat, "mae")?;
    let total: f64 = y
        .data()
        .iter()
        .zip(yhat.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / y.data().len() as f64)
}

/// Mean squared difference over all n·m entries.
pub fn mse(y: &Matrix, yhat: &Matrix) -> Result<f64> {
    check_same_shape(y, yhat, "mse")?;
    let total: f64 = y
        .data()
        .iter()
        .zip(yhat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / y.data().len() as f64)
}

/// Builds the full report for one prediction.
pub fn report(y: &Matrix, yhat: &Matrix) -> Result<MetricsReport> {
    let (overall, per_gene, skipped) = pcc(y, yhat)?;
    Ok(MetricsReport {
        pcc: overall,
        mae: mae(y, yhat)?,
        mse: mse(y, yhat)?,
        skipped_genes: skipped,
        per_gene_pcc: per_gene,
    })
}

fn check_paired_batches(
    gene_emb: &EmbeddingBatch,
    img_emb: &EmbeddingBatch,
    context: &'static str,
) -> Result<usize> {
    gene_emb.require_nondegenerate()?;
    img_emb.require_nondegenerate()?;
    if gene_emb.n() != img_emb.n() {
        return Err(Error::shape(
            context,
            format!("{} rows", gene_emb.n()),
            format!("{} rows", img_emb.n()),
        ));
    }
    if gene_emb.n() < 3 {
        return Err(Error::Validation(format!(
            "{context} needs at least 3 spots, got {}",
            gene_emb.n()
        )));
    }
    Ok(gene_emb.n())
}

/// Fraction of anchor-plus-two-targets trials where the target with the
/// strictly higher gene similarity to the anchor also has the strictly higher
/// image similarity.
///
/// Each trial draws a seeded shuffle and takes its first three entries as
/// anchor and targets. Gene-similarity ties redraw the trial a bounded number
/// of times, then skip it; the result is correct/evaluated (0 if every trial
/// was skipped).
pub fn rank_accuracy(
    gene_emb: &EmbeddingBatch,
    img_emb: &EmbeddingBatch,
    trials: usize,
    rng_seed: u64,
) -> Result<f64> {
    let n = check_paired_batches(gene_emb, img_emb, "rank_accuracy")?;
    if trials == 0 {
        return Err(Error::Validation("rank_accuracy needs at least 1 trial".into()));
    }
    let mut correct = 0usize;
    let mut evaluated = 0usize;
    let mut indices: Vec<usize> = (0..n).collect();
    for trial in 0..trials as u64 {
        for attempt in 0..RANK_TIE_RETRIES {
            indices.shuffle(&mut stream_rng(rng_seed, &[trial, attempt]));
            let (p, q, r) = (indices[0], indices[1], indices[2]);
            let gene_q = dot(gene_emb.row(p), gene_emb.row(q));
            let gene_r = dot(gene_emb.row(p), gene_emb.row(r));
            if gene_q == gene_r {
                continue;
            }
            let (hi, lo) = if gene_q > gene_r { (q, r) } else { (r, q) };
            evaluated += 1;
            if dot(img_emb.row(p), img_emb.row(hi)) > dot(img_emb.row(p), img_emb.row(lo)) {
                correct += 1;
            }
            break;
        }
    }
    if evaluated == 0 {
        return Ok(0.0);
    }
    Ok(correct as f64 / evaluated as f64)
}

/// Coefficient of determination of the least-squares fit of image distances
/// to gene distances over sampled spot pairs.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct R2Output {
    pub r2: f64,
    /// Set when all sampled distances were identical; `r2` is then 0.
    pub degenerate: bool,
}

/// Sampled spot-pair distances for one modality pair, used both by the R²
/// fit and for scatter export.
pub fn sample_pair_distances(
    gene_emb: &EmbeddingBatch,
    img_emb: &EmbeddingBatch,
    n_pairs: usize,
    rng_seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let n = check_paired_batches(gene_emb, img_emb, "distance_correlation_r2")?;
    if n_pairs == 0 {
        return Err(Error::Validation("need at least 1 pair".into()));
    }
    let mut rng = stream_rng(rng_seed, &[0]);
    let mut out = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let gene_dist = 1.0 - dot(gene_emb.row(a), gene_emb.row(b));
        let img_dist = 1.0 - dot(img_emb.row(a), img_emb.row(b));
        out.push((gene_dist, img_dist));
    }
    Ok(out)
}

/// Fits image distance against gene distance by ordinary least squares over
/// `n_pairs` sampled spot pairs and returns R².
pub fn distance_correlation_r2(
    gene_emb: &EmbeddingBatch,
    img_emb: &EmbeddingBatch,
    n_pairs: usize,
    rng_seed: u64,
) -> Result<R2Output> {
    let pairs = sample_pair_distances(gene_emb, img_emb, n_pairs, rng_seed)?;
    Ok(r2_of_pairs(&pairs))
}

/// R² of the OLS fit y ~ x for (x, y) pairs. Identical distances on either
/// axis make the fit degenerate: R² is then 0 with the flag set.
pub fn r2_of_pairs(pairs: &[(f64, f64)]) -> R2Output {
    if pairs.iter().all(|p| p.0 == pairs[0].0) || pairs.iter().all(|p| p.1 == pairs[0].1) {
        return R2Output {
            r2: 0.0,
            degenerate: true,
        };
    }
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in pairs {
        sxx += (x - mean_x) * (x - mean_x);
        syy += (y - mean_y) * (y - mean_y);
        sxy += (x - mean_x) * (y - mean_y);
    }
    R2Output {
        r2: ((sxy * sxy) / (sxx * syy)).min(1.0),
        degenerate: false,
    }
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic given the seed;
/// empty clusters are reseeded to the point farthest from its center.
pub fn kmeans(x: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<Vec<usize>> {
    let n = x.rows();
    if k == 0 || k > n {
        return Err(Error::Validation(format!(
            "k must be in 1..={n}, got {k}"
        )));
    }
    let mut rng = stream_rng(seed, &[0]);
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    // k-means++ seeding.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(x.row(rng.random_range(0..n)).to_vec());
    let mut best_d2: Vec<f64> = (0..n).map(|i| dist2(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best_d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in best_d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(x.row(next).to_vec());
        for i in 0..n {
            best_d2[i] = best_d2[i].min(dist2(x.row(i), centers.last().unwrap()));
        }
    }

    let mut labels = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..max_iter {
        // Assignment.
        let mut inertia = 0.0;
        let mut changed = false;
        for i in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(x.row(i), center);
                if d < best.0 {
                    best = (d, c);
                }
            }
            inertia += best.0;
            if labels[i] != best.1 {
                labels[i] = best.1;
                changed = true;
            }
        }
        debug_assert!(
            inertia <= prev_inertia * (1.0 + 1e-12) + 1e-12,
            "inertia increased: {prev_inertia} -> {inertia}"
        );
        if !changed && inertia == prev_inertia {
            break;
        }
        prev_inertia = inertia;

        // Update, reseeding empty clusters to the farthest point.
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; x.cols()]; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let farthest = (0..n)
                    .max_by(|&a, &b| {
                        dist2(x.row(a), &centers[labels[a]])
                            .partial_cmp(&dist2(x.row(b), &centers[labels[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centers[c] = x.row(farthest).to_vec();
            } else {
                for (cv, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
        }
    }
    Ok(labels)
}

fn entropy(counts: &HashMap<usize, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// v-measure (β = 1): harmonic mean of homogeneity and completeness from the
/// label contingency table, natural-log entropies. In [0, 1]; symmetric and
/// invariant to label renaming.
pub fn v_score(labels_true: &[usize], labels_pred: &[usize]) -> Result<f64> {
    if labels_true.len() != labels_pred.len() {
        return Err(Error::shape(
            "v_score",
            labels_true.len().to_string(),
            labels_pred.len().to_string(),
        ));
    }
    if labels_true.is_empty() {
        return Err(Error::Validation("v_score needs at least one label".into()));
    }
    let n = labels_true.len() as f64;
    let mut true_counts: HashMap<usize, usize> = HashMap::new();
    let mut pred_counts: HashMap<usize, usize> = HashMap::new();
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    for (&t, &p) in labels_true.iter().zip(labels_pred) {
        *true_counts.entry(t).or_default() += 1;
        *pred_counts.entry(p).or_default() += 1;
        *joint.entry((t, p)).or_default() += 1;
    }
    let h_true = entropy(&true_counts, n);
    let h_pred = entropy(&pred_counts, n);
    let mut mutual_info = 0.0;
    for (&(t, p), &c) in &joint {
        let p_tp = c as f64 / n;
        let p_t = true_counts[&t] as f64 / n;
        let p_p = pred_counts[&p] as f64 / n;
        mutual_info += p_tp * (p_tp / (p_t * p_p)).ln();
    }
    let mutual_info = mutual_info.max(0.0);
    let homogeneity = if h_true == 0.0 { 1.0 } else { (mutual_info / h_true).clamp(0.0, 1.0) };
    let completeness = if h_pred == 0.0 { 1.0 } else { (mutual_info / h_pred).clamp(0.0, 1.0) };
    if homogeneity + completeness == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * homogeneity * completeness / (homogeneity + completeness))
}
