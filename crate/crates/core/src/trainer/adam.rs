//! Bias-corrected Adam over MLP parameter blocks.

use crate::error::{Error, Result};
use crate::numcore::{GradBundle, Matrix, MlpParams};
use serde::{Deserialize, Serialize};

/// Adam hyperparameters for one parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators mirroring one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamLayer {
    pub m_weight: Matrix,
    pub v_weight: Matrix,
    pub m_bias: Vec<f64>,
    pub v_bias: Vec<f64>,
}

/// Optimizer state for one MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub layers: Vec<AdamLayer>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &MlpParams) -> Self {
        AdamState {
            layers: params
                .layers()
                .iter()
                .map(|l| AdamLayer {
                    m_weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    v_weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    m_bias: vec![0.0; l.bias.len()],
                    v_bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            step: 0,
        }
    }

    /// Appends moments per layer in the order m_weight, m_bias, v_weight,
    /// v_bias (weights row-major).
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(layer.m_weight.data());
            out.extend_from_slice(&layer.m_bias);
            out.extend_from_slice(layer.v_weight.data());
            out.extend_from_slice(&layer.v_bias);
        }
    }

    pub fn flat_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| 2 * (l.m_weight.data().len() + l.m_bias.len()))
            .sum()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::shape(
                "AdamState::set_flat",
                self.flat_len().to_string(),
                flat.len().to_string(),
            ));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w_len = layer.m_weight.data().len();
            let b_len = layer.m_bias.len();
            layer.m_weight.data_mut().copy_from_slice(&flat[offset..offset + w_len]);
            offset += w_len;
            layer.m_bias.copy_from_slice(&flat[offset..offset + b_len]);
            offset += b_len;
            layer.v_weight.data_mut().copy_from_slice(&flat[offset..offset + w_len]);
            offset += w_len;
            layer.v_bias.copy_from_slice(&flat[offset..offset + b_len]);
            offset += b_len;
        }
        Ok(())
    }
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    hp: &AdamHyper,
    bias1: f64,
    bias2: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}

/// One bias-corrected Adam step. The step counter advances even for an
/// all-zero gradient; a non-finite gradient aborts naming the layer.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &GradBundle,
    state: &mut AdamState,
    hp: &AdamHyper,
) -> Result<()> {
    if grads.layers.len() != params.layers().len() || state.layers.len() != params.layers().len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} layers", params.layers().len()),
            format!("{} grad / {} state", grads.layers.len(), state.layers.len()),
        ));
    }
    for (l, g) in grads.layers.iter().enumerate() {
        if !g.weight.is_finite() || g.bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: format!("gradient of layer {l}"),
            });
        }
        let p = &params.layers()[l];
        if g.weight.rows() != p.weight.rows()
            || g.weight.cols() != p.weight.cols()
            || g.bias.len() != p.bias.len()
        {
            return Err(Error::shape(
                "adam_step",
                format!("layer {l}: {}x{}", p.weight.rows(), p.weight.cols()),
                format!("{}x{}", g.weight.rows(), g.weight.cols()),
            ));
        }
    }
    state.step += 1;
    let bias1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bias2 = 1.0 - hp.beta2.powi(state.step as i32);
    for (l, layer) in params.layers_mut().iter_mut().enumerate() {
        let g = &grads.layers[l];
        let s = &mut state.layers[l];
        adam_update(
            layer.weight.data_mut(),
            g.weight.data(),
            s.m_weight.data_mut(),
            s.v_weight.data_mut(),
            hp,
            bias1,
            bias2,
        );
        adam_update(
            &mut layer.bias,
            &g.bias,
            &mut s.m_bias,
            &mut s.v_bias,
            hp,
            bias1,
            bias2,
        );
    }
    Ok(())
}
