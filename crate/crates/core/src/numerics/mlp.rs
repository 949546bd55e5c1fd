use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, NumericsError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Elementwise activations used by the agent and auxiliary networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Elu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output y = f(x).
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            // y = e^x - 1 for x <= 0, so f'(x) = e^x = y + 1; f'(x) = 1 for x > 0.
            Activation::Elu => {
                if y > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// One dense layer: linear map, optional layer norm, then activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_dim: usize,
    pub activation: Activation,
    pub layer_norm: bool,
}

/// Feedforward MLP shape description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    pub fn new(in_dim: usize, layers: Vec<LayerSpec>) -> Result<Self, NumericsError> {
        if in_dim == 0 || layers.is_empty() || layers.iter().any(|l| l.out_dim == 0) {
            return Err(NumericsError::InvalidSpec(
                "MlpSpec needs a nonzero input dim and at least one nonzero layer".into(),
            ));
        }
        Ok(MlpSpec { in_dim, layers })
    }

    /// Stack of LayerNorm+ELU layers (the observation-encoder family).
    pub fn layer_norm_stack(in_dim: usize, widths: &[usize]) -> Self {
        MlpSpec {
            in_dim,
            layers: widths
                .iter()
                .map(|&w| LayerSpec { out_dim: w, activation: Activation::Elu, layer_norm: true })
                .collect(),
        }
    }

    /// ELU hidden layers, no layer norm, explicit output activation.
    pub fn elu_head(in_dim: usize, hidden: &[usize], out_dim: usize, out_act: Activation) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&w| LayerSpec { out_dim: w, activation: Activation::Elu, layer_norm: false })
            .collect();
        layers.push(LayerSpec { out_dim, activation: out_act, layer_norm: false });
        MlpSpec { in_dim, layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(self.in_dim)
    }
}

/// Concrete parameters for one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// in_dim × out_dim.
    pub w: Matrix,
    /// 1 × out_dim.
    pub b: Matrix,
    /// 1 × out_dim each, present iff the layer uses layer norm.
    pub ln_gain: Option<Matrix>,
    pub ln_offset: Option<Matrix>,
}

/// Parameters of a whole MLP, in spec layer order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub spec: MlpSpec,
    pub layers: Vec<LayerParams>,
}

/// Identifies one tensor within a `ParamSet` (or a standalone tensor).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    LnGain,
    LnOffset,
}

impl ParamSet {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains.
    /// `final_weight_scale` shrinks the last layer's weights (used to start
    /// the policy mean near zero).
    pub fn init(spec: MlpSpec, rng: &mut impl Rng, final_weight_scale: f64) -> Self {
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut in_dim = spec.in_dim;
        let n_layers = spec.layers.len();
        for (i, layer) in spec.layers.iter().enumerate() {
            let out_dim = layer.out_dim;
            let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
            let scale = if i + 1 == n_layers { final_weight_scale } else { 1.0 };
            let w = Matrix::from_fn(in_dim, out_dim, |_, _| {
                scale * (rng.random::<f64>() * 2.0 - 1.0) * bound
            });
            let b = Matrix::zeros(1, out_dim);
            let (ln_gain, ln_offset) = if layer.layer_norm {
                (Some(Matrix::filled(1, out_dim, 1.0)), Some(Matrix::zeros(1, out_dim)))
            } else {
                (None, None)
            };
            layers.push(LayerParams { w, b, ln_gain, ln_offset });
            in_dim = out_dim;
        }
        ParamSet { spec, layers }
    }

    /// Tensors in canonical order: per layer w, b, then gain/offset if present.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.w);
            out.push(&l.b);
            if let Some(g) = &l.ln_gain {
                out.push(g);
            }
            if let Some(o) = &l.ln_offset {
                out.push(o);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
            if let Some(g) = &mut l.ln_gain {
                out.push(g);
            }
            if let Some(o) = &mut l.ln_offset {
                out.push(o);
            }
        }
        out
    }

    /// Canonical tensor names, aligned with `tensors()`.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(format!("layer{i}.w"));
            out.push(format!("layer{i}.b"));
            if l.ln_gain.is_some() {
                out.push(format!("layer{i}.ln_gain"));
            }
            if l.ln_offset.is_some() {
                out.push(format!("layer{i}.ln_offset"));
            }
        }
        out
    }

    /// Index into `tensors()` for a (layer, kind) pair.
    pub fn tensor_index(&self, layer: usize, kind: ParamKind) -> usize {
        let mut idx = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if i == layer {
                return match kind {
                    ParamKind::Weight => idx,
                    ParamKind::Bias => idx + 1,
                    ParamKind::LnGain => idx + 2,
                    ParamKind::LnOffset => idx + 3,
                };
            }
            idx += 2;
            if l.ln_gain.is_some() {
                idx += 2;
            }
        }
        panic!("layer {layer} out of range");
    }

    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Inference-mode forward pass (no tape).
    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.forward_impl(x, false)
    }

    /// Forward pass that skips the final layer's activation, yielding logits
    /// for losses fused with the output nonlinearity.
    pub fn forward_logits(&self, x: &Matrix) -> Matrix {
        self.forward_impl(x, true)
    }

    fn forward_impl(&self, x: &Matrix, skip_final_act: bool) -> Matrix {
        assert_eq!(
            x.cols(),
            self.spec.in_dim,
            "MLP input dim mismatch: got {}, spec wants {}",
            x.cols(),
            self.spec.in_dim
        );
        let n = self.layers.len();
        let mut h = x.clone();
        for (i, (layer, spec)) in self.layers.iter().zip(&self.spec.layers).enumerate() {
            h = linear_forward(layer, &h);
            if spec.layer_norm {
                h = layer_norm(
                    &h,
                    layer.ln_gain.as_ref().expect("ln params"),
                    layer.ln_offset.as_ref().expect("ln params"),
                );
            }
            if !(skip_final_act && i + 1 == n) {
                h.map_inplace(|v| spec.activation.apply(v));
            }
        }
        h
    }
}

/// y = xW + b.
pub fn linear_forward(layer: &LayerParams, x: &Matrix) -> Matrix {
    assert_eq!(
        x.cols(),
        layer.w.rows(),
        "linear_forward shape mismatch: input cols {} vs weight rows {}",
        x.cols(),
        layer.w.rows()
    );
    let mut y = x.matmul(&layer.w);
    y.add_row_broadcast(&layer.b);
    y
}

/// Elementwise activation over a matrix.
pub fn activation(kind: Activation, x: &Matrix) -> Matrix {
    x.map(|v| kind.apply(v))
}

/// Per-row normalization to mean 0 / variance 1 followed by the affine map
/// `gain * xhat + offset`. Uses population variance and eps = 1e-5.
pub fn layer_norm(x: &Matrix, gain: &Matrix, offset: &Matrix) -> Matrix {
    assert_eq!(gain.cols(), x.cols());
    assert_eq!(offset.cols(), x.cols());
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let orow = out.row_mut(r);
        for c in 0..row.len() {
            orow[c] = (row[c] - mean) * rstd * gain.data()[c] + offset.data()[c];
        }
    }
    out
}
