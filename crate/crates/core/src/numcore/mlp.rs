//! Three-layer perceptron with explicit reverse-mode gradients.
//!
//! Hidden layers use the rectifier, the output layer is linear so embeddings
//! can occupy all of R^D before normalization.

use crate::error::{Error, Result};
use crate::numcore::matrix::Matrix;
use crate::rng::stream_rng;
use rand::Rng;

/// Number of layers every network in this crate has.
pub const MLP_LAYERS: usize = 3;

/// One dense layer: `weight` is input×output, `bias` has one entry per output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameters of a 3-layer MLP with rectifier hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<MlpLayer>,
}

impl MlpParams {
    /// Seeded init: weights uniform in ±1/√fan_in with one RNG stream per
    /// layer index; biases at a small positive constant so rectifier units
    /// stay alive on sparse or all-zero input rows.
    pub fn init(dims: &[usize; MLP_LAYERS + 1], seed: u64) -> Self {
        let mut layers = Vec::with_capacity(MLP_LAYERS);
        for l in 0..MLP_LAYERS {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let mut rng = stream_rng(seed, &[l as u64]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            layers.push(MlpLayer {
                weight: Matrix::from_vec(fan_in, fan_out, data).expect("init length"),
                bias: vec![0.01; fan_out],
            });
        }
        MlpParams { layers }
    }

    /// Builds from explicit layers, validating the 3-layer dimension chain.
    pub fn from_layers(layers: Vec<MlpLayer>) -> Result<Self> {
        if layers.len() != MLP_LAYERS {
            return Err(Error::Validation(format!(
                "expected {MLP_LAYERS} layers, got {}",
                layers.len()
            )));
        }
        for l in 0..layers.len() {
            if layers[l].bias.len() != layers[l].weight.cols() {
                return Err(Error::shape(
                    "MlpParams::from_layers",
                    format!("bias of length {}", layers[l].weight.cols()),
                    layers[l].bias.len().to_string(),
                ));
            }
            if l > 0 && layers[l - 1].weight.cols() != layers[l].weight.rows() {
                return Err(Error::shape(
                    "MlpParams::from_layers",
                    format!("layer {l} input width {}", layers[l - 1].weight.cols()),
                    layers[l].weight.rows().to_string(),
                ));
            }
            if !layers[l].weight.is_finite() || layers[l].bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    component: format!("layer {l} parameters"),
                });
            }
        }
        Ok(MlpParams { layers })
    }

    pub fn layers(&self) -> &[MlpLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[MLP_LAYERS - 1].weight.cols()
    }

    pub fn dims(&self) -> [usize; MLP_LAYERS + 1] {
        [
            self.layers[0].weight.rows(),
            self.layers[0].weight.cols(),
            self.layers[1].weight.cols(),
            self.layers[2].weight.cols(),
        ]
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Appends all parameters (per layer: weight row-major, then bias).
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(&layer.bias);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.flatten_into(&mut out);
        out
    }

    /// Overwrites all parameters from a flat slice laid out as in
    /// [`MlpParams::flatten_into`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape(
                "MlpParams::set_flat",
                self.len().to_string(),
                flat.len().to_string(),
            ));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w_len = layer.weight.data().len();
            layer.weight.data_mut().copy_from_slice(&flat[offset..offset + w_len]);
            offset += w_len;
            let b_len = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + b_len]);
            offset += b_len;
        }
        Ok(())
    }

    pub fn from_flat(dims: &[usize; MLP_LAYERS + 1], flat: &[f64]) -> Result<Self> {
        let mut params = MlpParams::init(dims, 0);
        params.set_flat(flat)?;
        Ok(params)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [MlpLayer] {
        &mut self.layers
    }
}

/// Activation record from a forward pass, consumed by [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (index 0 is the network input).
    inputs: Vec<Matrix>,
    /// Pre-activation output of each layer.
    pre: Vec<Matrix>,
}

/// Per-layer gradients plus the gradient w.r.t. the network input.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub layers: Vec<MlpLayer>,
    pub d_input: Matrix,
}

impl GradBundle {
    pub fn zeros_like(params: &MlpParams, batch_rows: usize) -> Self {
        GradBundle {
            layers: params
                .layers()
                .iter()
                .map(|l| MlpLayer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            d_input: Matrix::zeros(batch_rows, params.input_dim()),
        }
    }

    /// Appends all gradients in the layout of [`MlpParams::flatten_into`].
    pub fn flatten_params_into(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(&layer.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
            && self.d_input.is_finite()
    }
}

/// Runs the batch `x` (rows are samples) through the network.
pub fn mlp_forward(params: &MlpParams, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if x.cols() != params.input_dim() {
        return Err(Error::shape(
            "mlp_forward",
            format!("input width {}", params.input_dim()),
            x.cols().to_string(),
        ));
    }
    let mut inputs = Vec::with_capacity(MLP_LAYERS);
    let mut pre = Vec::with_capacity(MLP_LAYERS);
    let mut act = x.clone();
    for (l, layer) in params.layers().iter().enumerate() {
        inputs.push(act.clone());
        let mut z = act.matmul(&layer.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        pre.push(z.clone());
        act = if l + 1 < MLP_LAYERS {
            z.map(|v| v.max(0.0))
        } else {
            z
        };
    }
    Ok((act, ForwardCache { inputs, pre }))
}

/// Reverse-mode gradients for a forward pass.
///
/// `upstream` is dLoss/dOutput with the output's shape. The rectifier
/// subgradient at 0 is 0.
pub fn mlp_backward(params: &MlpParams, cache: &ForwardCache, upstream: &Matrix) -> Result<GradBundle> {
    let last = &cache.pre[MLP_LAYERS - 1];
    if upstream.rows() != last.rows() || upstream.cols() != last.cols() {
        return Err(Error::shape(
            "mlp_backward",
            format!("{}x{}", last.rows(), last.cols()),
            format!("{}x{}", upstream.rows(), upstream.cols()),
        ));
    }
    if cache.inputs[0].cols() != params.input_dim() {
        return Err(Error::shape(
            "mlp_backward",
            format!("cache for input width {}", params.input_dim()),
            cache.inputs[0].cols().to_string(),
        ));
    }
    let mut grads = Vec::with_capacity(MLP_LAYERS);
    let mut d_out = upstream.clone();
    for l in (0..MLP_LAYERS).rev() {
        let layer = &params.layers()[l];
        if cache.inputs[l].cols() != layer.weight.rows() {
            return Err(Error::shape(
                "mlp_backward",
                format!("layer {l} input width {}", layer.weight.rows()),
                cache.inputs[l].cols().to_string(),
            ));
        }
        // d_z: gradient w.r.t. the pre-activation of layer l.
        let d_z = if l + 1 < MLP_LAYERS {
            let mut d = d_out.clone();
            let z = &cache.pre[l];
            for (dv, zv) in d.data_mut().iter_mut().zip(z.data()) {
                if *zv <= 0.0 {
                    *dv = 0.0;
                }
            }
            d
        } else {
            d_out.clone()
        };
        let d_weight = cache.inputs[l].transpose().matmul(&d_z)?;
        let mut d_bias = vec![0.0; layer.bias.len()];
        for r in 0..d_z.rows() {
            for (b, v) in d_bias.iter_mut().zip(d_z.row(r)) {
                *b += v;
            }
        }
        d_out = d_z.matmul(&layer.weight.transpose())?;
        grads.push(MlpLayer {
            weight: d_weight,
            bias: d_bias,
        });
    }
    grads.reverse();
    Ok(GradBundle {
        layers: grads,
        d_input: d_out,
    })
}
