//! Teacher/student image encoders, the gene encoder, feature-space
//! augmentations, and the EMA teacher update.
//!
//! Each encoder is a 3-layer MLP whose output rows are unit-normalized into an
//! [`EmbeddingBatch`]. The teacher is never gradient-updated: it starts as an
//! exact copy of the student and tracks it by exponential moving average.

use crate::error::{Error, Result};
use crate::numcore::{
    l2_normalize_rows, l2_normalize_rows_backward, mlp_backward, mlp_forward, ForwardCache,
    GradBundle, Matrix, MlpParams,
};
use crate::rng::stream_rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// An N×D block of row-unit-normalized feature vectors for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    matrix: Matrix,
    zero_rows: Vec<usize>,
}

impl EmbeddingBatch {
    /// Unit-normalizes the rows of `m`; zero rows are kept and flagged.
    pub fn normalize(m: &Matrix) -> Self {
        let (matrix, zero_rows) = l2_normalize_rows(m);
        EmbeddingBatch { matrix, zero_rows }
    }

    /// Wraps rows that are already unit within a loose tolerance. Intended
    /// for hand-built batches in tests and for reloading exported embeddings.
    pub fn from_unit_rows(m: Matrix) -> Result<Self> {
        for r in 0..m.rows() {
            let norm2: f64 = m.row(r).iter().map(|v| v * v).sum();
            if (norm2 - 1.0).abs() > 1e-3 {
                return Err(Error::Validation(format!(
                    "row {r} has squared norm {norm2}, expected 1"
                )));
            }
        }
        Ok(EmbeddingBatch {
            matrix: m,
            zero_rows: Vec::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.matrix.row(r)
    }

    pub fn zero_rows(&self) -> &[usize] {
        &self.zero_rows
    }

    /// Errors if any row was flagged as zero under normalization.
    pub fn require_nondegenerate(&self) -> Result<()> {
        match self.zero_rows.first() {
            None => Ok(()),
            Some(&first) => Err(Error::DegenerateEmbedding {
                count: self.zero_rows.len(),
                first,
            }),
        }
    }
}

/// Which image encoder a batch flows through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Student,
    Teacher,
}

/// Student/teacher image encoders plus the gene encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub student_image: MlpParams,
    pub teacher_image: MlpParams,
    pub gene: MlpParams,
    pub embed_dim: usize,
}

impl EncoderState {
    /// Seeded init. The teacher starts as an exact copy of the student; both
    /// hidden layers have width `embed_dim`.
    pub fn new(gene_input_dim: usize, image_input_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let student_image = MlpParams::init(
            &[image_input_dim, embed_dim, embed_dim, embed_dim],
            crate::rng::mix(seed, &[stream::INIT_IMAGE]),
        );
        let gene = MlpParams::init(
            &[gene_input_dim, embed_dim, embed_dim, embed_dim],
            crate::rng::mix(seed, &[stream::INIT_GENE]),
        );
        EncoderState {
            teacher_image: student_image.clone(),
            student_image,
            gene,
            embed_dim,
        }
    }

    pub fn gene_input_dim(&self) -> usize {
        self.gene.input_dim()
    }

    pub fn image_input_dim(&self) -> usize {
        self.student_image.input_dim()
    }
}

mod stream {
    pub const INIT_IMAGE: u64 = 0x01;
    pub const INIT_GENE: u64 = 0x02;
    pub const AUG_NOISE: u64 = 0x03;
    pub const AUG_DROPOUT: u64 = 0x04;
}

/// Feature-space augmentation strengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub strong_dropout_rate: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_noise_sigma: 0.01,
            strong_noise_sigma: 0.1,
            strong_dropout_rate: 0.2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.weak_noise_sigma && self.weak_noise_sigma <= self.strong_noise_sigma) {
            return Err(Error::Config(format!(
                "need 0 <= weak sigma <= strong sigma, got {} and {}",
                self.weak_noise_sigma, self.strong_noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.strong_dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.strong_dropout_rate
            )));
        }
        Ok(())
    }

    /// All-zero config: both augmentations become the identity.
    pub fn disabled() -> Self {
        AugmentConfig {
            weak_noise_sigma: 0.0,
            strong_noise_sigma: 0.0,
            strong_dropout_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    Weak,
    Strong,
}

/// Activation record for one encode call; absent on the teacher branch.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    mlp: ForwardCache,
    raw_output: Matrix,
}

/// Embeddings plus, on gradient-bearing branches, the backward cache.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub embeddings: EmbeddingBatch,
    pub cache: Option<EncodeCache>,
}

fn encode(params: &MlpParams, block: &Matrix, keep_cache: bool) -> Result<Encoded> {
    let (raw, cache) = mlp_forward(params, block)?;
    let embeddings = EmbeddingBatch::normalize(&raw);
    Ok(Encoded {
        embeddings,
        cache: keep_cache.then_some(EncodeCache {
            mlp: cache,
            raw_output: raw,
        }),
    })
}

/// Maps an expression block (rows are spots) to unit gene embeddings.
pub fn encode_gene(state: &EncoderState, expr_block: &Matrix) -> Result<Encoded> {
    encode(&state.gene, expr_block, true)
}

/// Maps an image feature block through the chosen branch. The teacher branch
/// records no backward cache.
pub fn encode_image(state: &EncoderState, branch: Branch, feat_block: &Matrix) -> Result<Encoded> {
    match branch {
        Branch::Student => encode(&state.student_image, feat_block, true),
        Branch::Teacher => encode(&state.teacher_image, feat_block, false),
    }
}

/// Gradient of a scalar loss w.r.t. encoder parameters, given the gradient
/// w.r.t. the unit embedding rows.
pub fn encode_backward(params: &MlpParams, cache: &EncodeCache, d_embeddings: &Matrix) -> Result<GradBundle> {
    let d_raw = l2_normalize_rows_backward(&cache.raw_output, d_embeddings)?;
    mlp_backward(params, &cache.mlp, &d_raw)
}

/// Applies weak (Gaussian noise) or strong (Gaussian noise then coordinate
/// dropout) augmentation in feature space. Deterministic given the seed.
pub fn augment(feat_block: &Matrix, mode: AugmentMode, cfg: &AugmentConfig, rng_seed: u64) -> Matrix {
    let sigma = match mode {
        AugmentMode::Weak => cfg.weak_noise_sigma,
        AugmentMode::Strong => cfg.strong_noise_sigma,
    };
    let mut out = feat_block.clone();
    if sigma > 0.0 {
        let mut rng = stream_rng(rng_seed, &[stream::AUG_NOISE]);
        for v in out.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    }
    if mode == AugmentMode::Strong && cfg.strong_dropout_rate > 0.0 {
        let mut rng = stream_rng(rng_seed, &[stream::AUG_DROPOUT]);
        for v in out.data_mut() {
            if rng.random::<f64>() < cfg.strong_dropout_rate {
                *v = 0.0;
            }
        }
    }
    out
}

/// Moves every teacher parameter toward the student:
/// `t ← m·t + (1 − m)·s`.
pub fn ema_update(state: &mut EncoderState, momentum: f64) -> Result<()> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!(
            "EMA momentum must be in [0, 1), got {momentum}"
        )));
    }
    if state.teacher_image.dims() != state.student_image.dims() {
        return Err(Error::shape(
            "ema_update",
            format!("{:?}", state.student_image.dims()),
            format!("{:?}", state.teacher_image.dims()),
        ));
    }
    for (t, s) in state
        .teacher_image
        .layers_mut()
        .iter_mut()
        .zip(state.student_image.layers())
    {
        for (tv, sv) in t.weight.data_mut().iter_mut().zip(s.weight.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
        for (tv, sv) in t.bias.iter_mut().zip(&s.bias) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::dot;

    fn random_block(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = stream_rng(seed, &[42]);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn encode_gene_is_forward_plus_normalize() {
        let state = EncoderState::new(6, 4, 3, 9);
        let x = random_block(5, 6, 1);
        let out = encode_gene(&state, &x).unwrap();
        let (raw, _) = mlp_forward(&state.gene, &x).unwrap();
        let (expect, _) = l2_normalize_rows(&raw);
        assert_eq!(out.embeddings.matrix(), &expect);
        assert!(out.cache.is_some());
        for r in 0..out.embeddings.n() {
            let row = out.embeddings.row(r);
            assert!((dot(row, row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_encode_identically() {
        let state = EncoderState::new(4, 4, 3, 9);
        let row = vec![0.3, -0.4, 0.9, 0.1];
        let x = Matrix::from_rows(&[row.clone(), row]).unwrap();
        let out = encode_gene(&state, &x).unwrap();
        assert_eq!(out.embeddings.row(0), out.embeddings.row(1));
    }

    #[test]
    fn teacher_branch_has_no_cache_and_matches_student_at_init() {
        let state = EncoderState::new(4, 5, 3, 9);
        let x = random_block(4, 5, 2);
        let teacher = encode_image(&state, Branch::Teacher, &x).unwrap();
        let student = encode_image(&state, Branch::Student, &x).unwrap();
        assert!(teacher.cache.is_none());
        assert!(student.cache.is_some());
        assert_eq!(teacher.embeddings, student.embeddings);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let state = EncoderState::new(4, 5, 3, 9);
        assert!(encode_gene(&state, &Matrix::zeros(2, 5)).is_err());
        assert!(encode_image(&state, Branch::Student, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn augment_noop_config_is_identity() {
        let x = random_block(3, 4, 3);
        let cfg = AugmentConfig::disabled();
        assert_eq!(augment(&x, AugmentMode::Weak, &cfg, 7), x);
        assert_eq!(augment(&x, AugmentMode::Strong, &cfg, 7), x);
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let x = random_block(3, 4, 4);
        let cfg = AugmentConfig::default();
        let a = augment(&x, AugmentMode::Strong, &cfg, 11);
        let b = augment(&x, AugmentMode::Strong, &cfg, 11);
        let c = augment(&x, AugmentMode::Strong, &cfg, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn strong_dropout_hits_expected_fraction() {
        let x = Matrix::from_vec(100, 1000, vec![1.0; 100_000]).unwrap();
        let cfg = AugmentConfig {
            weak_noise_sigma: 0.0,
            strong_noise_sigma: 0.0,
            strong_dropout_rate: 0.2,
        };
        let out = augment(&x, AugmentMode::Strong, &cfg, 5);
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 100_000.0;
        assert!((frac - 0.2).abs() < 0.01, "zeroed fraction {frac}");
    }

    #[test]
    fn ema_blends_teacher_toward_student() {
        let mut state = EncoderState::new(2, 2, 2, 0);
        for layer in state.teacher_image.layers_mut() {
            layer.weight.data_mut().fill(1.0);
            layer.bias.fill(1.0);
        }
        for layer in state.student_image.layers_mut() {
            layer.weight.data_mut().fill(0.0);
            layer.bias.fill(0.0);
        }
        ema_update(&mut state, 0.96).unwrap();
        for layer in state.teacher_image.layers() {
            for v in layer.weight.data() {
                assert!((v - 0.96).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ema_zero_momentum_copies_student() {
        let mut state = EncoderState::new(3, 3, 2, 1);
        for layer in state.teacher_image.layers_mut() {
            layer.weight.data_mut().fill(9.0);
        }
        ema_update(&mut state, 0.0).unwrap();
        assert_eq!(state.teacher_image, state.student_image);
    }

    #[test]
    fn ema_contracts_geometrically() {
        let mut state = EncoderState::new(2, 2, 2, 3);
        // Constant student w = 0.25; teacher starts at 1.0.
        for layer in state.student_image.layers_mut() {
            layer.weight.data_mut().fill(0.25);
            layer.bias.fill(0.25);
        }
        for layer in state.teacher_image.layers_mut() {
            layer.weight.data_mut().fill(1.0);
            layer.bias.fill(1.0);
        }
        let m: f64 = 0.5;
        for _ in 0..10 {
            ema_update(&mut state, m).unwrap();
        }
        let expect = 0.25 + m.powi(10) * (1.0 - 0.25);
        for layer in state.teacher_image.layers() {
            for v in layer.weight.data() {
                assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
            }
        }
        assert!(ema_update(&mut state, 1.0).is_err());
    }

    #[test]
    fn zero_mlp_output_row_is_flagged() {
        let m = Matrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 2.0]).unwrap();
        let batch = EmbeddingBatch::normalize(&m);
        assert_eq!(batch.zero_rows(), &[0]);
        assert!(batch.require_nondegenerate().is_err());
    }
}
