//! Gene expression prediction head: a fresh 3-layer MLP trained with mean
//! squared error on (image feature → expression) pairs.

use super::adam::{adam_step, AdamHyper, AdamState};
use crate::error::{Error, Result};
use crate::numcore::{mlp_backward, mlp_forward, Matrix, MlpParams};
use crate::rng::{mix, stream_rng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            hidden_dim: 64,
            epochs: 300,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("hidden_dim and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Trains the prediction head on mean squared error with seeded minibatch
/// Adam. Deterministic given the config.
pub fn fit_gene_predictor(
    features: &Matrix,
    targets: &Matrix,
    cfg: &PredictorConfig,
) -> Result<MlpParams> {
    cfg.validate()?;
    if features.rows() != targets.rows() {
        return Err(Error::shape(
            "fit_gene_predictor",
            format!("{} feature rows", targets.rows()),
            features.rows().to_string(),
        ));
    }
    if features.rows() == 0 {
        return Err(Error::Validation("no training rows".into()));
    }
    let mut params = MlpParams::init(
        &[features.cols(), cfg.hidden_dim, cfg.hidden_dim, targets.cols()],
        mix(cfg.seed, &[0x30]),
    );
    let mut adam = AdamState::zeros_like(&params);
    let hyper = AdamHyper::with_lr(cfg.lr);
    let n = features.rows();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed, &[0x31, epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let x = gather(features, chunk);
            let t = gather(targets, chunk);
            let (pred, cache) = mlp_forward(&params, &x)?;
            // L = mean((pred − t)²) over batch entries.
            let scale = 2.0 / (pred.data().len() as f64);
            let mut upstream = pred.clone();
            for (u, tv) in upstream.data_mut().iter_mut().zip(t.data()) {
                *u = scale * (*u - tv);
            }
            let grads = mlp_backward(&params, &cache, &upstream)?;
            adam_step(&mut params, &grads, &mut adam, &hyper)?;
        }
    }
    Ok(params)
}

/// Predicted expression for each feature row.
pub fn predict_genes(params: &MlpParams, features: &Matrix) -> Result<Matrix> {
    Ok(mlp_forward(params, features)?.0)
}

fn gather(m: &Matrix, indices: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(indices.len(), m.cols());
    for (r, &i) in indices.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mse;
    use rand::Rng;

    #[test]
    fn fits_a_linear_target() {
        let mut rng = stream_rng(1, &[50]);
        let n = 64;
        let features = Matrix::from_vec(
            n,
            4,
            (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        // Linear target: t = features · W.
        let w = Matrix::from_vec(4, 3, (0..12).map(|i| (i as f64 - 6.0) / 6.0).collect()).unwrap();
        let targets = features.matmul(&w).unwrap();
        let cfg = PredictorConfig {
            epochs: 400,
            ..PredictorConfig::default()
        };
        let params = fit_gene_predictor(&features, &targets, &cfg).unwrap();
        let pred = predict_genes(&params, &features).unwrap();
        let err = mse(&targets, &pred).unwrap();
        assert!(err < 1e-3, "training MSE {err}");
    }

    #[test]
    fn constant_targets_converge_to_the_constant() {
        let mut rng = stream_rng(2, &[51]);
        let features = Matrix::from_vec(
            40,
            3,
            (0..120).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let targets = Matrix::from_vec(40, 2, vec![0.7; 80]).unwrap();
        let params = fit_gene_predictor(&features, &targets, &PredictorConfig::default()).unwrap();
        let pred = predict_genes(&params, &features).unwrap();
        let err = mse(&targets, &pred).unwrap();
        assert!(err < 1e-3, "MSE against the constant {err}");
    }

    #[test]
    fn fit_is_deterministic() {
        let mut rng = stream_rng(3, &[52]);
        let features = Matrix::from_vec(
            20,
            3,
            (0..60).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let targets = features.map(|v| v * 2.0);
        let cfg = PredictorConfig {
            epochs: 5,
            ..PredictorConfig::default()
        };
        let a = fit_gene_predictor(&features, &targets, &cfg).unwrap();
        let b = fit_gene_predictor(&features, &targets, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(fit_gene_predictor(&features, &Matrix::zeros(19, 3), &cfg).is_err());
    }
}
