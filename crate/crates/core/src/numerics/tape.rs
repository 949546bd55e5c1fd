use super::mlp::{Activation, LayerParams, ParamKind, ParamSet, LAYER_NORM_EPS};
use super::Matrix;

const LN_2PI: f64 = 1.8378770664093453;

/// Index of a recorded tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Identifies a gradient accumulator: `net` selects a parameter set in the
/// `GradSink`, `tensor` an entry of `ParamSet::tensors()`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub net: usize,
    pub tensor: usize,
}

enum Op<'p> {
    Input,
    Linear {
        x: NodeId,
        w: &'p Matrix,
        wslot: Slot,
        bslot: Slot,
    },
    LayerNorm {
        x: NodeId,
        gain: &'p Matrix,
        gslot: Slot,
        oslot: Slot,
        /// Normalized pre-affine values, kept for the backward pass.
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Activation {
        x: NodeId,
        kind: Activation,
    },
    Concat {
        a: NodeId,
        b: NodeId,
        a_cols: usize,
    },
    /// Diagonal-Gaussian log density of fixed actions under mean (node) and
    /// a learnable 1×A log-std row. Produces a B×1 column.
    GaussianLogProb {
        mean: NodeId,
        log_std: &'p Matrix,
        sslot: Slot,
        actions: Matrix,
    },
    /// Closed-form per-sample entropy of the diagonal Gaussian; scalar node.
    GaussianEntropy {
        log_std: &'p Matrix,
        sslot: Slot,
    },
    MseLoss {
        pred: NodeId,
        target: Matrix,
        count: f64,
    },
    /// Mean binary cross-entropy on logits with a positive-class weight.
    BceLogitsLoss {
        logits: NodeId,
        target: Matrix,
        pos_weight: f64,
        count: f64,
    },
    /// Mean clipped-surrogate policy loss -E[min(rho*A, clip(rho)*A)].
    PpoClipLoss {
        logp: NodeId,
        old_logp: Vec<f64>,
        advantage: Vec<f64>,
        clip: f64,
    },
    /// Mean clipped value loss E[max((V-T)^2, (Vold+clip(V-Vold)-T)^2)].
    ClippedValueLoss {
        value: NodeId,
        old_value: Vec<f64>,
        target: Vec<f64>,
        clip: f64,
    },
}

struct Node<'p> {
    op: Op<'p>,
    val: Matrix,
}

/// Gradient accumulators for a group of networks. `nets[i]` is aligned with
/// the i-th registered `ParamSet::tensors()` order (a standalone tensor such
/// as the policy log-std registers as a single-tensor net).
pub struct GradSink {
    pub nets: Vec<Vec<Matrix>>,
}

impl GradSink {
    pub fn for_nets(nets: &[Vec<&Matrix>]) -> Self {
        GradSink {
            nets: nets
                .iter()
                .map(|ts| ts.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect())
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for net in &mut self.nets {
            for t in net {
                t.data_mut().fill(0.0);
            }
        }
    }

    pub fn add_assign(&mut self, other: &GradSink) {
        for (a, b) in self.nets.iter_mut().zip(&other.nets) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_assign(y);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for net in &mut self.nets {
            for t in net {
                t.scale(s);
            }
        }
    }

    pub fn global_sq_norm(&self) -> f64 {
        self.nets.iter().flatten().map(|t| t.sq_sum()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.nets.iter().flatten().all(|t| t.all_finite())
    }

    fn accum(&mut self, slot: Slot, grad: &Matrix) {
        self.nets[slot.net][slot.tensor].add_assign(grad);
    }
}

/// Per-node gradients left over after a backward pass; lets tests read
/// gradients with respect to recorded inputs.
pub struct NodeGrads {
    grads: Vec<Option<Matrix>>,
}

impl NodeGrads {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }
}

/// Reverse-mode tape over matrix-level operations. Record a forward pass,
/// then call [`Tape::backward`], which consumes the tape (a tape cannot be
/// replayed twice).
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Default for Tape<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<'p>, val: Matrix) -> NodeId {
        self.nodes.push(Node { op, val });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].val
    }

    /// Scalar value of a loss/entropy node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].val.get(0, 0)
    }

    /// Element count a mean-loss node averaged over.
    pub fn loss_count(&self, id: NodeId) -> f64 {
        match &self.nodes[id.0].op {
            Op::MseLoss { count, .. } | Op::BceLogitsLoss { count, .. } => *count,
            Op::PpoClipLoss { old_logp, .. } => old_logp.len() as f64,
            Op::ClippedValueLoss { old_value, .. } => old_value.len() as f64,
            Op::GaussianEntropy { .. } => 1.0,
            _ => panic!("loss_count on non-loss node"),
        }
    }

    pub fn input(&mut self, x: Matrix) -> NodeId {
        self.push(Op::Input, x)
    }

    pub fn linear(&mut self, x: NodeId, layer: &'p LayerParams, wslot: Slot, bslot: Slot) -> NodeId {
        let val = super::mlp::linear_forward(layer, self.value(x));
        self.push(Op::Linear { x, w: &layer.w, wslot, bslot }, val)
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        if kind == Activation::Identity {
            return x;
        }
        let val = self.value(x).map(|v| kind.apply(v));
        self.push(Op::Activation { x, kind }, val)
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: &'p Matrix,
        offset: &'p Matrix,
        gslot: Slot,
        oslot: Slot,
    ) -> NodeId {
        let xv = self.value(x);
        let rows = xv.rows();
        let cols = xv.cols();
        let n = cols as f64;
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut val = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat.set(r, c, xh);
                val.set(r, c, xh * gain.data()[c] + offset.data()[c]);
            }
        }
        self.push(Op::LayerNorm { x, gain, gslot, oslot, xhat, rstd }, val)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let val = Matrix::concat_cols(self.value(a), self.value(b));
        let a_cols = self.value(a).cols();
        self.push(Op::Concat { a, b, a_cols }, val)
    }

    /// Record a full MLP forward pass. `net` is the GradSink index for
    /// `params`. With `skip_final_act` the last layer's activation is left
    /// off (for losses fused with the output nonlinearity).
    pub fn mlp(
        &mut self,
        net: usize,
        params: &'p ParamSet,
        x: NodeId,
        skip_final_act: bool,
    ) -> NodeId {
        let n_layers = params.layers.len();
        let mut h = x;
        for (i, (layer, spec)) in params.layers.iter().zip(&params.spec.layers).enumerate() {
            let wslot = Slot { net, tensor: params.tensor_index(i, ParamKind::Weight) };
            let bslot = Slot { net, tensor: params.tensor_index(i, ParamKind::Bias) };
            h = self.linear(h, layer, wslot, bslot);
            if spec.layer_norm {
                let gslot = Slot { net, tensor: params.tensor_index(i, ParamKind::LnGain) };
                let oslot = Slot { net, tensor: params.tensor_index(i, ParamKind::LnOffset) };
                h = self.layer_norm(
                    h,
                    layer.ln_gain.as_ref().expect("ln params"),
                    layer.ln_offset.as_ref().expect("ln params"),
                    gslot,
                    oslot,
                );
            }
            if !(skip_final_act && i + 1 == n_layers) {
                h = self.activation(h, spec.activation);
            }
        }
        h
    }

    pub fn gaussian_log_prob(
        &mut self,
        mean: NodeId,
        log_std: &'p Matrix,
        sslot: Slot,
        actions: Matrix,
    ) -> NodeId {
        let mu = self.value(mean);
        debug_assert_eq!(mu.shape(), actions.shape());
        debug_assert_eq!(log_std.cols(), mu.cols());
        let rows = mu.rows();
        let mut val = Matrix::zeros(rows, 1);
        for r in 0..rows {
            let mut lp = 0.0;
            for c in 0..mu.cols() {
                let s = log_std.data()[c];
                let z = (actions.get(r, c) - mu.get(r, c)) * (-s).exp();
                lp += -0.5 * LN_2PI - s - 0.5 * z * z;
            }
            val.set(r, 0, lp);
        }
        self.push(Op::GaussianLogProb { mean, log_std, sslot, actions }, val)
    }

    pub fn gaussian_entropy(&mut self, log_std: &'p Matrix, sslot: Slot) -> NodeId {
        let h: f64 =
            log_std.data().iter().map(|s| 0.5 * (LN_2PI + 1.0) + s).sum();
        let val = Matrix::from_vec(1, 1, vec![h]).unwrap();
        self.push(Op::GaussianEntropy { log_std, sslot }, val)
    }

    pub fn mse_loss(&mut self, pred: NodeId, target: Matrix) -> NodeId {
        let p = self.value(pred);
        debug_assert_eq!(p.shape(), target.shape());
        let count = p.len() as f64;
        let sum: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let val = Matrix::from_vec(1, 1, vec![sum / count]).unwrap();
        self.push(Op::MseLoss { pred, target, count }, val)
    }

    pub fn bce_logits_loss(&mut self, logits: NodeId, target: Matrix, pos_weight: f64) -> NodeId {
        let l = self.value(logits);
        debug_assert_eq!(l.shape(), target.shape());
        let count = l.len() as f64;
        let sum: f64 = l
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| pos_weight * t * softplus(-x) + (1.0 - t) * softplus(x))
            .sum();
        let val = Matrix::from_vec(1, 1, vec![sum / count]).unwrap();
        self.push(Op::BceLogitsLoss { logits, target, pos_weight, count }, val)
    }

    pub fn ppo_clip_loss(
        &mut self,
        logp: NodeId,
        old_logp: Vec<f64>,
        advantage: Vec<f64>,
        clip: f64,
    ) -> NodeId {
        let lp = self.value(logp);
        debug_assert_eq!(lp.rows(), old_logp.len());
        debug_assert_eq!(lp.cols(), 1);
        let n = old_logp.len() as f64;
        let mut sum = 0.0;
        for r in 0..old_logp.len() {
            let rho = (lp.get(r, 0) - old_logp[r]).exp();
            let a = advantage[r];
            let unclipped = rho * a;
            let clipped = rho.clamp(1.0 - clip, 1.0 + clip) * a;
            sum += -unclipped.min(clipped);
        }
        let val = Matrix::from_vec(1, 1, vec![sum / n]).unwrap();
        self.push(Op::PpoClipLoss { logp, old_logp, advantage, clip }, val)
    }

    pub fn clipped_value_loss(
        &mut self,
        value: NodeId,
        old_value: Vec<f64>,
        target: Vec<f64>,
        clip: f64,
    ) -> NodeId {
        let v = self.value(value);
        debug_assert_eq!(v.rows(), old_value.len());
        debug_assert_eq!(v.cols(), 1);
        let n = old_value.len() as f64;
        let mut sum = 0.0;
        for r in 0..old_value.len() {
            let vi = v.get(r, 0);
            let vc = old_value[r] + (vi - old_value[r]).clamp(-clip, clip);
            let e1 = vi - target[r];
            let e2 = vc - target[r];
            sum += (e1 * e1).max(e2 * e2);
        }
        let val = Matrix::from_vec(1, 1, vec![sum / n]).unwrap();
        self.push(Op::ClippedValueLoss { value, old_value, target, clip }, val)
    }

    /// Reverse pass from a weighted combination of scalar nodes. Parameter
    /// gradients accumulate into `sink`; per-node gradients are returned for
    /// callers that need input gradients. Consumes the tape.
    pub fn backward(self, seeds: &[(NodeId, f64)], sink: &mut GradSink) -> NodeGrads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(id, w) in seeds {
            let node = &self.nodes[id.0];
            debug_assert_eq!(node.val.shape(), (1, 1), "backward seeds must be scalar nodes");
            match &mut grads[id.0] {
                Some(g) => g.data_mut()[0] += w,
                slot => *slot = Some(Matrix::from_vec(1, 1, vec![w]).unwrap()),
            }
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {
                    // Keep input gradients readable after the pass.
                    grads[i] = Some(gy);
                }
                Op::Linear { x, w, wslot, bslot } => {
                    let xv = &self.nodes[x.0].val;
                    sink.nets[wslot.net][wslot.tensor].add_assign(&xv.matmul_tn(&gy));
                    sink.accum(*bslot, &gy.col_sums());
                    accum(&mut grads, *x, gy.matmul_nt(w));
                }
                Op::Activation { x, kind } => {
                    let yv = &self.nodes[i].val;
                    let mut gx = gy;
                    for (g, y) in gx.data_mut().iter_mut().zip(yv.data()) {
                        *g *= kind.derivative_from_output(*y);
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gain, gslot, oslot, xhat, rstd } => {
                    let rows = gy.rows();
                    let cols = gy.cols();
                    let n = cols as f64;
                    let mut ggain = Matrix::zeros(1, cols);
                    let mut goffset = Matrix::zeros(1, cols);
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gyr = gy.row(r);
                        let xhr = xhat.row(r);
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let dxhat = gyr[c] * gain.data()[c];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhr[c];
                            ggain.data_mut()[c] += gyr[c] * xhr[c];
                            goffset.data_mut()[c] += gyr[c];
                        }
                        mean_dxhat /= n;
                        mean_dxhat_xhat /= n;
                        let gxr = gx.row_mut(r);
                        for c in 0..cols {
                            let dxhat = gyr[c] * gain.data()[c];
                            gxr[c] = rstd[r] * (dxhat - mean_dxhat - xhr[c] * mean_dxhat_xhat);
                        }
                    }
                    sink.accum(*gslot, &ggain);
                    sink.accum(*oslot, &goffset);
                    accum(&mut grads, *x, gx);
                }
                Op::Concat { a, b, a_cols } => {
                    let rows = gy.rows();
                    let b_cols = gy.cols() - a_cols;
                    let mut ga = Matrix::zeros(rows, *a_cols);
                    let mut gb = Matrix::zeros(rows, b_cols);
                    for r in 0..rows {
                        ga.row_mut(r).copy_from_slice(&gy.row(r)[..*a_cols]);
                        gb.row_mut(r).copy_from_slice(&gy.row(r)[*a_cols..]);
                    }
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::GaussianLogProb { mean, log_std, sslot, actions } => {
                    let mu = &self.nodes[mean.0].val;
                    let rows = mu.rows();
                    let cols = mu.cols();
                    let mut gmu = Matrix::zeros(rows, cols);
                    let mut gs = Matrix::zeros(1, cols);
                    for c in 0..cols {
                        let inv_var = (-2.0 * log_std.data()[c]).exp();
                        let mut gsc = 0.0;
                        for r in 0..rows {
                            let glp = gy.get(r, 0);
                            let diff = actions.get(r, c) - mu.get(r, c);
                            gmu.set(r, c, glp * diff * inv_var);
                            gsc += glp * (diff * diff * inv_var - 1.0);
                        }
                        gs.data_mut()[c] = gsc;
                    }
                    sink.accum(*sslot, &gs);
                    accum(&mut grads, *mean, gmu);
                }
                Op::GaussianEntropy { log_std, sslot } => {
                    let seed = gy.get(0, 0);
                    let gs = Matrix::filled(1, log_std.cols(), seed);
                    sink.accum(*sslot, &gs);
                }
                Op::MseLoss { pred, target, count } => {
                    let seed = gy.get(0, 0);
                    let pv = &self.nodes[pred.0].val;
                    let mut gp = Matrix::zeros(pv.rows(), pv.cols());
                    for (g, (p, t)) in
                        gp.data_mut().iter_mut().zip(pv.data().iter().zip(target.data()))
                    {
                        *g = seed * 2.0 * (p - t) / count;
                    }
                    accum(&mut grads, *pred, gp);
                }
                Op::BceLogitsLoss { logits, target, pos_weight, count } => {
                    let seed = gy.get(0, 0);
                    let lv = &self.nodes[logits.0].val;
                    let mut gl = Matrix::zeros(lv.rows(), lv.cols());
                    for (g, (&l, &t)) in
                        gl.data_mut().iter_mut().zip(lv.data().iter().zip(target.data()))
                    {
                        let sig = 1.0 / (1.0 + (-l).exp());
                        *g = seed * (-pos_weight * t * (1.0 - sig) + (1.0 - t) * sig) / count;
                    }
                    accum(&mut grads, *logits, gl);
                }
                Op::PpoClipLoss { logp, old_logp, advantage, clip } => {
                    let seed = gy.get(0, 0);
                    let lp = &self.nodes[logp.0].val;
                    let n = old_logp.len() as f64;
                    let mut gl = Matrix::zeros(lp.rows(), 1);
                    for r in 0..old_logp.len() {
                        let rho = (lp.get(r, 0) - old_logp[r]).exp();
                        let a = advantage[r];
                        let unclipped = rho * a;
                        let clipped = rho.clamp(1.0 - clip, 1.0 + clip) * a;
                        if unclipped <= clipped {
                            gl.set(r, 0, seed * (-a * rho) / n);
                        }
                    }
                    accum(&mut grads, *logp, gl);
                }
                Op::ClippedValueLoss { value, old_value, target, clip } => {
                    let seed = gy.get(0, 0);
                    let vv = &self.nodes[value.0].val;
                    let n = old_value.len() as f64;
                    let mut gv = Matrix::zeros(vv.rows(), 1);
                    for r in 0..old_value.len() {
                        let vi = vv.get(r, 0);
                        let dv = vi - old_value[r];
                        let vc = old_value[r] + dv.clamp(-clip, clip);
                        let e1 = vi - target[r];
                        let e2 = vc - target[r];
                        let g = if e1 * e1 >= e2 * e2 {
                            2.0 * e1
                        } else if dv.abs() < clip {
                            2.0 * e2
                        } else {
                            0.0
                        };
                        gv.set(r, 0, seed * g / n);
                    }
                    accum(&mut grads, *value, gv);
                }
            }
        }
        NodeGrads { grads }
    }
}

fn accum(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
