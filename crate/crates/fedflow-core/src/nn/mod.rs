//! Neural-network core: layer specs, forward/backward passes, losses, Adam,
//! and a finite-difference gradient checker.
//!
//! Networks are plain layer lists over flat tensors. Working precision is
//! `f32`; all code is generic over the float type so the gradient checker
//! can run the identical computation in `f64`.

pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use gradcheck::{check_gradients, check_gradients_with_step, GradCheckReport, LossSpec};
pub use loss::{cross_entropy, cross_entropy_grad, mse, mse_grad};
pub use tensor::{Tensor, TensorF};

use num_traits::Float;
use tensor::{axpy, dot};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("network has {params} parameters, above the finite-difference limit {limit}")]
    TooLarge { params: usize, limit: usize },
}

/// One layer. Convolutions are stride-1 with valid (no) padding; pooling
/// truncates a trailing partial window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    MaxPool1d {
        window: usize,
    },
    ReLU,
    Flatten,
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

impl LayerKind {
    fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv1d { .. } | LayerKind::Linear { .. })
    }
}

/// A named layer within a network; names must be unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
        }
    }
}

/// A named parameter tensor (`<layer>.weight` / `<layer>.bias`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub tensor: Tensor<F>,
}

/// An ordered stack of layers plus their parameters.
#[derive(Debug, Clone)]
pub struct Network<F> {
    specs: Vec<LayerSpec>,
    entries: Vec<ParamEntry<F>>,
    /// Index of the weight entry of each layer (bias follows it), if any.
    layer_slots: Vec<Option<usize>>,
    /// Layer each entry belongs to.
    entry_layers: Vec<usize>,
    /// Per-example activation shape entering each layer; the final element
    /// is the output shape.
    layer_inputs: Vec<Vec<usize>>,
}

impl<F: Float> Network<F> {
    /// Builds a network with zero-initialized parameters, validating that
    /// adjacent layer shapes are compatible for the given per-example input
    /// shape.
    pub fn new(specs: Vec<LayerSpec>, input_shape: Vec<usize>) -> Result<Self, NnError> {
        let mut names = std::collections::HashSet::new();
        for s in &specs {
            if !names.insert(s.name.clone()) {
                return Err(NnError::ShapeMismatch(format!(
                    "duplicate layer name {:?}",
                    s.name
                )));
            }
        }
        let mut layer_inputs = vec![input_shape];
        let mut entries = Vec::new();
        let mut layer_slots = Vec::with_capacity(specs.len());
        let mut entry_layers = Vec::new();
        for (li, spec) in specs.iter().enumerate() {
            let cur = layer_inputs.last().unwrap().clone();
            let bad = |msg: String| {
                NnError::ShapeMismatch(format!("layer {:?}: {msg} (input {cur:?})", spec.name))
            };
            let next = match spec.kind {
                LayerKind::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    if cur.len() != 2 || cur[0] != in_channels {
                        return Err(bad(format!("expected [{in_channels}, L] input")));
                    }
                    if kernel == 0 || cur[1] < kernel {
                        return Err(bad(format!("kernel {kernel} exceeds length {}", cur[1])));
                    }
                    entries.push(ParamEntry {
                        name: format!("{}.weight", spec.name),
                        tensor: Tensor::zeros(vec![out_channels, in_channels, kernel]),
                    });
                    entries.push(ParamEntry {
                        name: format!("{}.bias", spec.name),
                        tensor: Tensor::zeros(vec![out_channels]),
                    });
                    vec![out_channels, cur[1] - kernel + 1]
                }
                LayerKind::MaxPool1d { window } => {
                    if cur.len() != 2 {
                        return Err(bad("expected [C, L] input".into()));
                    }
                    if window == 0 || cur[1] / window == 0 {
                        return Err(bad(format!("window {window} exceeds length {}", cur[1])));
                    }
                    vec![cur[0], cur[1] / window]
                }
                LayerKind::ReLU => cur.clone(),
                LayerKind::Flatten => {
                    if cur.len() != 2 {
                        return Err(bad("expected [C, L] input".into()));
                    }
                    vec![cur[0] * cur[1]]
                }
                LayerKind::Linear { inputs, outputs } => {
                    if cur != [inputs] {
                        return Err(bad(format!("expected [{inputs}] input")));
                    }
                    entries.push(ParamEntry {
                        name: format!("{}.weight", spec.name),
                        tensor: Tensor::zeros(vec![outputs, inputs]),
                    });
                    entries.push(ParamEntry {
                        name: format!("{}.bias", spec.name),
                        tensor: Tensor::zeros(vec![outputs]),
                    });
                    vec![outputs]
                }
                LayerKind::Softmax => {
                    if cur.len() != 1 {
                        return Err(bad("expected flat input".into()));
                    }
                    cur.clone()
                }
            };
            if spec.kind.has_params() {
                layer_slots.push(Some(entries.len() - 2));
                entry_layers.push(li);
                entry_layers.push(li);
            } else {
                layer_slots.push(None);
            }
            layer_inputs.push(next);
        }
        Ok(Network {
            specs,
            entries,
            layer_slots,
            entry_layers,
            layer_inputs,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    /// Layer index owning parameter entry `idx`.
    pub fn entry_layer(&self, idx: usize) -> usize {
        self.entry_layers[idx]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.layer_inputs[0]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layer_inputs.last().unwrap()
    }

    /// Per-example activation shapes entering each layer (plus the output).
    pub fn activation_shapes(&self) -> &[Vec<usize>] {
        &self.layer_inputs
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Number of layers run during training: a trailing softmax is bypassed
    /// because cross-entropy consumes logits directly.
    pub fn train_depth(&self) -> usize {
        match self.specs.last() {
            Some(s) if s.kind == LayerKind::Softmax => self.specs.len() - 1,
            _ => self.specs.len(),
        }
    }

    pub fn cast<G: Float>(&self) -> Network<G> {
        Network {
            specs: self.specs.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
            layer_slots: self.layer_slots.clone(),
            entry_layers: self.entry_layers.clone(),
            layer_inputs: self.layer_inputs.clone(),
        }
    }

    fn check_batched_shape(&self, layer: usize, act: &Tensor<F>) -> Result<usize, NnError> {
        let expected = &self.layer_inputs[layer];
        if act.shape().len() != expected.len() + 1 || &act.shape()[1..] != expected.as_slice() {
            return Err(NnError::ShapeMismatch(format!(
                "activation {:?} does not match [batch]+{expected:?} at layer {layer}",
                act.shape()
            )));
        }
        Ok(act.shape()[0])
    }

    fn weights_of(&self, layer: usize) -> (&Tensor<F>, &Tensor<F>) {
        let slot = self.layer_slots[layer].expect("parameterized layer");
        (&self.entries[slot].tensor, &self.entries[slot + 1].tensor)
    }

    /// Runs layers `from..to` on a batched activation.
    pub(crate) fn forward_range(
        &self,
        from: usize,
        to: usize,
        mut act: Tensor<F>,
    ) -> Result<Tensor<F>, NnError> {
        self.check_batched_shape(from, &act)?;
        for layer in from..to {
            act = self.apply_layer(layer, &act)?;
        }
        Ok(act)
    }

    /// Full forward pass over a batch shaped `[B] + input_shape`.
    pub fn forward(&self, input: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        let out = self.forward_range(0, self.specs.len(), input.clone())?;
        if !out.is_finite() {
            return Err(NnError::Numeric("non-finite value in network output".into()));
        }
        Ok(out)
    }

    /// Forward pass stopping before a trailing softmax.
    pub fn forward_logits(&self, input: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        let out = self.forward_range(0, self.train_depth(), input.clone())?;
        if !out.is_finite() {
            return Err(NnError::Numeric("non-finite value in network logits".into()));
        }
        Ok(out)
    }

    /// Forward pass through `depth` layers that also returns the input seen
    /// by every traversed layer, as required by `backward`.
    pub fn forward_cached(
        &self,
        input: &Tensor<F>,
        depth: usize,
    ) -> Result<(Tensor<F>, Vec<Tensor<F>>), NnError> {
        self.check_batched_shape(0, input)?;
        let mut cache = Vec::with_capacity(depth);
        let mut act = input.clone();
        for layer in 0..depth {
            let next = self.apply_layer(layer, &act)?;
            cache.push(act);
            act = next;
        }
        Ok((act, cache))
    }

    fn apply_layer(&self, layer: usize, act: &Tensor<F>) -> Result<Tensor<F>, NnError> {
        let batch = self.check_batched_shape(layer, act)?;
        let shape_in = &self.layer_inputs[layer];
        let out = match self.specs[layer].kind {
            LayerKind::Conv1d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let (w, b) = self.weights_of(layer);
                conv1d_forward(act, w, b, batch, in_channels, out_channels, kernel, shape_in[1])
            }
            LayerKind::MaxPool1d { window } => {
                maxpool_forward(act, batch, shape_in[0], shape_in[1], window)
            }
            LayerKind::ReLU => {
                let mut out = act.clone();
                for v in out.data_mut() {
                    if *v < F::zero() {
                        *v = F::zero();
                    }
                }
                out
            }
            LayerKind::Flatten => {
                let mut shape = vec![batch];
                shape.extend(&self.layer_inputs[layer + 1]);
                act.clone().reshaped(shape)?
            }
            LayerKind::Linear { inputs, outputs } => {
                let (w, b) = self.weights_of(layer);
                linear_forward(act, w, b, batch, inputs, outputs)
            }
            LayerKind::Softmax => softmax_forward(act, batch, shape_in[0]),
        };
        Ok(out)
    }

    /// Backpropagates `grad_out` through layers `depth-1..=0` given the
    /// activation cache of the matching `forward_cached` call; returns one
    /// gradient tensor per parameter entry (zeros for entries of deeper
    /// layers).
    pub fn backward(
        &self,
        cache: &[Tensor<F>],
        grad_out: &Tensor<F>,
        depth: usize,
    ) -> Result<Vec<Tensor<F>>, NnError> {
        if cache.len() != depth {
            return Err(NnError::ShapeMismatch(format!(
                "cache has {} layers, expected {depth}",
                cache.len()
            )));
        }
        let mut grads: Vec<Tensor<F>> = self
            .entries
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect();
        let mut g = grad_out.clone();
        for layer in (0..depth).rev() {
            let x = &cache[layer];
            let batch = x.shape()[0];
            let shape_in = &self.layer_inputs[layer];
            g = match self.specs[layer].kind {
                LayerKind::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let (w, _) = self.weights_of(layer);
                    let slot = self.layer_slots[layer].unwrap();
                    let (gx, gw, gb) = conv1d_backward(
                        x,
                        w,
                        &g,
                        batch,
                        in_channels,
                        out_channels,
                        kernel,
                        shape_in[1],
                    );
                    grads[slot] = gw;
                    grads[slot + 1] = gb;
                    gx
                }
                LayerKind::MaxPool1d { window } => {
                    maxpool_backward(x, &g, batch, shape_in[0], shape_in[1], window)
                }
                LayerKind::ReLU => {
                    let mut gx = g;
                    for (gv, xv) in gx.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= F::zero() {
                            *gv = F::zero();
                        }
                    }
                    gx
                }
                LayerKind::Flatten => g.reshaped(x.shape().to_vec())?,
                LayerKind::Linear { inputs, outputs } => {
                    let (w, _) = self.weights_of(layer);
                    let slot = self.layer_slots[layer].unwrap();
                    let (gx, gw, gb) = linear_backward(x, w, &g, batch, inputs, outputs);
                    grads[slot] = gw;
                    grads[slot + 1] = gb;
                    gx
                }
                LayerKind::Softmax => softmax_backward(x, &g, batch, shape_in[0]),
            };
        }
        Ok(grads)
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    batch: usize,
    ci: usize,
    co: usize,
    k: usize,
    l: usize,
) -> Tensor<F> {
    let lo = l - k + 1;
    let mut out = vec![F::zero(); batch * co * lo];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for bi in 0..batch {
        for o in 0..co {
            let orow = &mut out[(bi * co + o) * lo..(bi * co + o + 1) * lo];
            for v in orow.iter_mut() {
                *v = bd[o];
            }
            for i in 0..ci {
                let xrow = &xd[(bi * ci + i) * l..(bi * ci + i + 1) * l];
                let wrow = &wd[(o * ci + i) * k..(o * ci + i + 1) * k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    axpy(orow, wv, &xrow[kk..kk + lo]);
                }
            }
        }
    }
    Tensor::new(vec![batch, co, lo], out).expect("conv shape")
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    gout: &Tensor<F>,
    batch: usize,
    ci: usize,
    co: usize,
    k: usize,
    l: usize,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let lo = l - k + 1;
    let mut gx = vec![F::zero(); batch * ci * l];
    let mut gw = vec![F::zero(); co * ci * k];
    let mut gb = vec![F::zero(); co];
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());
    for bi in 0..batch {
        for o in 0..co {
            let grow = &gd[(bi * co + o) * lo..(bi * co + o + 1) * lo];
            gb[o] = gb[o] + grow.iter().fold(F::zero(), |a, &v| a + v);
            for i in 0..ci {
                let xrow = &xd[(bi * ci + i) * l..(bi * ci + i + 1) * l];
                let gxrow = &mut gx[(bi * ci + i) * l..(bi * ci + i + 1) * l];
                for kk in 0..k {
                    let wv = wd[(o * ci + i) * k + kk];
                    axpy(&mut gxrow[kk..kk + lo], wv, grow);
                    let slot = (o * ci + i) * k + kk;
                    gw[slot] = gw[slot] + dot(&xrow[kk..kk + lo], grow);
                }
            }
        }
    }
    (
        Tensor::new(vec![batch, ci, l], gx).expect("conv gx"),
        Tensor::new(vec![co, ci, k], gw).expect("conv gw"),
        Tensor::new(vec![co], gb).expect("conv gb"),
    )
}

fn maxpool_forward<F: Float>(
    x: &Tensor<F>,
    batch: usize,
    c: usize,
    l: usize,
    window: usize,
) -> Tensor<F> {
    let lo = l / window;
    let mut out = vec![F::zero(); batch * c * lo];
    let xd = x.data();
    for row in 0..batch * c {
        let xrow = &xd[row * l..(row + 1) * l];
        let orow = &mut out[row * lo..(row + 1) * lo];
        for (p, ov) in orow.iter_mut().enumerate() {
            let mut best = xrow[p * window];
            for &v in &xrow[p * window + 1..(p + 1) * window] {
                if v > best {
                    best = v;
                }
            }
            *ov = best;
        }
    }
    Tensor::new(vec![batch, c, lo], out).expect("pool shape")
}

fn maxpool_backward<F: Float>(
    x: &Tensor<F>,
    gout: &Tensor<F>,
    batch: usize,
    c: usize,
    l: usize,
    window: usize,
) -> Tensor<F> {
    let lo = l / window;
    let mut gx = vec![F::zero(); batch * c * l];
    let (xd, gd) = (x.data(), gout.data());
    for row in 0..batch * c {
        let xrow = &xd[row * l..(row + 1) * l];
        let gxrow = &mut gx[row * l..(row + 1) * l];
        for p in 0..lo {
            // Ties route the gradient to the first maximal element.
            let mut best_idx = p * window;
            for idx in p * window + 1..(p + 1) * window {
                if xrow[idx] > xrow[best_idx] {
                    best_idx = idx;
                }
            }
            gxrow[best_idx] = gxrow[best_idx] + gd[row * lo + p];
        }
    }
    Tensor::new(vec![batch, c, l], gx).expect("pool gx")
}

fn linear_forward<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    batch: usize,
    inputs: usize,
    outputs: usize,
) -> Tensor<F> {
    let mut out = vec![F::zero(); batch * outputs];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for bi in 0..batch {
        let xrow = &xd[bi * inputs..(bi + 1) * inputs];
        let orow = &mut out[bi * outputs..(bi + 1) * outputs];
        for (o, ov) in orow.iter_mut().enumerate() {
            *ov = bd[o] + dot(&wd[o * inputs..(o + 1) * inputs], xrow);
        }
    }
    Tensor::new(vec![batch, outputs], out).expect("linear shape")
}

fn linear_backward<F: Float>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    gout: &Tensor<F>,
    batch: usize,
    inputs: usize,
    outputs: usize,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let mut gx = vec![F::zero(); batch * inputs];
    let mut gw = vec![F::zero(); outputs * inputs];
    let mut gb = vec![F::zero(); outputs];
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());
    for bi in 0..batch {
        let xrow = &xd[bi * inputs..(bi + 1) * inputs];
        let gxrow = &mut gx[bi * inputs..(bi + 1) * inputs];
        for o in 0..outputs {
            let go = gd[bi * outputs + o];
            gb[o] = gb[o] + go;
            axpy(&mut gw[o * inputs..(o + 1) * inputs], go, xrow);
            axpy(gxrow, go, &wd[o * inputs..(o + 1) * inputs]);
        }
    }
    (
        Tensor::new(vec![batch, inputs], gx).expect("linear gx"),
        Tensor::new(vec![outputs, inputs], gw).expect("linear gw"),
        Tensor::new(vec![outputs], gb).expect("linear gb"),
    )
}

pub(crate) fn softmax_rows<F: Float>(data: &mut [F], rows: usize, width: usize) {
    for r in 0..rows {
        let row = &mut data[r * width..(r + 1) * width];
        let max = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

fn softmax_forward<F: Float>(x: &Tensor<F>, batch: usize, width: usize) -> Tensor<F> {
    let mut out = x.clone();
    softmax_rows(out.data_mut(), batch, width);
    out
}

fn softmax_backward<F: Float>(x: &Tensor<F>, gout: &Tensor<F>, batch: usize, width: usize) -> Tensor<F> {
    let mut probs = x.clone();
    softmax_rows(probs.data_mut(), batch, width);
    let mut gx = vec![F::zero(); batch * width];
    let (pd, gd) = (probs.data(), gout.data());
    for r in 0..batch {
        let p = &pd[r * width..(r + 1) * width];
        let g = &gd[r * width..(r + 1) * width];
        let s = dot(g, p);
        for i in 0..width {
            gx[r * width + i] = p[i] * (g[i] - s);
        }
    }
    Tensor::new(vec![batch, width], gx).expect("softmax gx")
}
