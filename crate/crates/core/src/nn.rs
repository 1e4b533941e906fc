//! Network construction and execution with named inner-layer taps.
//!
//! A [`NetworkSpec`] is an ordered layer list with build-time shape
//! inference; [`build`] turns it into a [`NetworkState`] holding the
//! parameters. Forward passes are recorded on an autodiff tape, and any
//! layer output can be tapped by name so kernel losses can reach inner
//! activations.

use crate::autodiff::{AutodiffError, Gradients, Padding, Tape, Tensor, Var};
use crate::rng::Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        padding: Padding,
    },
    Relu,
    MaxPool2x2,
    GlobalAvgPool,
    Dense {
        out: usize,
    },
    BatchNorm,
    Dropout {
        p: f64,
    },
}

#[derive(Debug, Clone)]
pub enum NnError {
    InvalidSpec { layer: usize, reason: String },
    UnknownTap { name: String },
    InvalidProbability { p: f64 },
    ShapeMismatch { detail: String },
    Io(String),
    Autodiff(AutodiffError),
}

impl fmt::Display for NnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NnError::InvalidSpec { layer, reason } => {
                write!(f, "invalid spec at layer {layer}: {reason}")
            }
            NnError::UnknownTap { name } => write!(f, "unknown tap '{name}'"),
            NnError::InvalidProbability { p } => {
                write!(f, "drop probability {p} outside [0, 1)")
            }
            NnError::ShapeMismatch { detail } => write!(f, "shape mismatch: {detail}"),
            NnError::Io(e) => write!(f, "checkpoint io: {e}"),
            NnError::Autodiff(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for NnError {}

impl From<AutodiffError> for NnError {
    fn from(e: AutodiffError) -> Self {
        NnError::Autodiff(e)
    }
}

/// Ordered layers plus named taps (tap = index of the layer whose output is
/// exposed).
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub taps: BTreeMap<String, usize>,
}

impl NetworkSpec {
    pub fn new(input_shape: &[usize]) -> NetworkSpec {
        NetworkSpec {
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
            taps: BTreeMap::new(),
        }
    }

    pub fn conv(mut self, filters: usize, kernel: usize, padding: Padding) -> Self {
        self.layers.push(LayerSpec::Conv {
            filters,
            kernel,
            padding,
        });
        self
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(LayerSpec::Relu);
        self
    }

    pub fn maxpool(mut self) -> Self {
        self.layers.push(LayerSpec::MaxPool2x2);
        self
    }

    pub fn global_avgpool(mut self) -> Self {
        self.layers.push(LayerSpec::GlobalAvgPool);
        self
    }

    pub fn dense(mut self, out: usize) -> Self {
        self.layers.push(LayerSpec::Dense { out });
        self
    }

    pub fn batchnorm(mut self) -> Self {
        self.layers.push(LayerSpec::BatchNorm);
        self
    }

    pub fn dropout(mut self, p: f64) -> Self {
        self.layers.push(LayerSpec::Dropout { p });
        self
    }

    /// Names the output of the most recently added layer.
    pub fn tap(mut self, name: &str) -> Self {
        assert!(!self.layers.is_empty(), "tap on empty network");
        self.taps.insert(name.to_string(), self.layers.len() - 1);
        self
    }

    /// Per-sample output shape of every layer; validates the spec.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = apply_shape(layer, &cur)
                .map_err(|reason| NnError::InvalidSpec { layer: i, reason })?;
            shapes.push(cur.clone());
        }
        for (name, &idx) in &self.taps {
            if idx >= self.layers.len() {
                return Err(NnError::UnknownTap { name: name.clone() });
            }
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, NnError> {
        Ok(self
            .infer_shapes()?
            .last()
            .cloned()
            .unwrap_or_else(|| self.input_shape.clone()))
    }
}

fn apply_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>, String> {
    match layer {
        LayerSpec::Conv {
            filters,
            kernel,
            padding,
        } => {
            if input.len() != 3 {
                return Err(format!("conv needs [h, w, c] input, got {input:?}"));
            }
            let (h, w) = (input[0], input[1]);
            match padding {
                Padding::Valid => {
                    if h < *kernel || w < *kernel {
                        return Err(format!(
                            "kernel {kernel} too large for {h}x{w} with valid padding"
                        ));
                    }
                    Ok(vec![h - kernel + 1, w - kernel + 1, *filters])
                }
                Padding::Same => Ok(vec![h, w, *filters]),
            }
        }
        LayerSpec::Relu => Ok(input.to_vec()),
        LayerSpec::MaxPool2x2 => {
            if input.len() != 3 {
                return Err(format!("maxpool needs [h, w, c] input, got {input:?}"));
            }
            if input[0] % 2 != 0 || input[1] % 2 != 0 {
                return Err(format!("maxpool needs even spatial dims, got {input:?}"));
            }
            Ok(vec![input[0] / 2, input[1] / 2, input[2]])
        }
        LayerSpec::GlobalAvgPool => {
            if input.len() != 3 {
                return Err(format!("global avgpool needs [h, w, c], got {input:?}"));
            }
            Ok(vec![input[2]])
        }
        LayerSpec::Dense { out } => {
            if input.is_empty() {
                return Err("dense on empty shape".to_string());
            }
            Ok(vec![*out])
        }
        LayerSpec::BatchNorm => {
            if input.is_empty() {
                return Err("batchnorm on empty shape".to_string());
            }
            Ok(input.to_vec())
        }
        LayerSpec::Dropout { p } => {
            if !(0.0..1.0).contains(p) {
                return Err(format!("drop probability {p} outside [0, 1)"));
            }
            Ok(input.to_vec())
        }
    }
}

#[derive(Debug, Clone)]
pub enum LayerParams {
    Conv {
        w: Tensor,
        b: Tensor,
    },
    Dense {
        w: Tensor,
        b: Tensor,
    },
    BatchNorm {
        scale: Tensor,
        shift: Tensor,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A spec plus its parameters, mode, and batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct NetworkState {
    pub spec: NetworkSpec,
    pub params: Vec<LayerParams>,
    pub mode: Mode,
}

/// He-normal initialization: std = sqrt(2 / fan_in), biases zero, batch norm
/// scale 1 / shift 0.
pub fn build(spec: &NetworkSpec, rng: &mut Rng) -> Result<NetworkState, NnError> {
    let shapes = spec.infer_shapes()?;
    let mut params = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let in_shape = if i == 0 {
            spec.input_shape.clone()
        } else {
            shapes[i - 1].clone()
        };
        params.push(match layer {
            LayerSpec::Conv {
                filters, kernel, ..
            } => {
                let cin = in_shape[2];
                let fan_in = kernel * kernel * cin;
                let std = (2.0 / fan_in as f64).sqrt();
                let mut w = Tensor::zeros(&[*kernel, *kernel, cin, *filters]);
                for v in w.data_mut() {
                    *v = std * rng.next_normal();
                }
                LayerParams::Conv {
                    w: w.with_grad(),
                    b: Tensor::zeros(&[*filters]).with_grad(),
                }
            }
            LayerSpec::Dense { out } => {
                let fan_in: usize = in_shape.iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let mut w = Tensor::zeros(&[fan_in, *out]);
                for v in w.data_mut() {
                    *v = std * rng.next_normal();
                }
                LayerParams::Dense {
                    w: w.with_grad(),
                    b: Tensor::zeros(&[*out]).with_grad(),
                }
            }
            LayerSpec::BatchNorm => {
                let c = *in_shape.last().unwrap();
                LayerParams::BatchNorm {
                    scale: Tensor::new(&[c], vec![1.0; c]).unwrap().with_grad(),
                    shift: Tensor::zeros(&[c]).with_grad(),
                    running_mean: vec![0.0; c],
                    running_var: vec![1.0; c],
                }
            }
            _ => LayerParams::None,
        });
    }
    Ok(NetworkState {
        spec: spec.clone(),
        params,
        mode: Mode::Train,
    })
}

impl NetworkState {
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Flat (name, tensor) view of all trainable parameters, layer order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            match p {
                LayerParams::Conv { w, b } | LayerParams::Dense { w, b } => {
                    out.push((format!("layer{i}.w"), w.clone()));
                    out.push((format!("layer{i}.b"), b.clone()));
                }
                LayerParams::BatchNorm { scale, shift, .. } => {
                    out.push((format!("layer{i}.scale"), scale.clone()));
                    out.push((format!("layer{i}.shift"), shift.clone()));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// Overwrites trainable parameters from a flat list in `named_params`
    /// order.
    pub fn set_params_from_flat(&mut self, flat: &[Tensor]) {
        let mut it = flat.iter();
        for p in self.params.iter_mut() {
            match p {
                LayerParams::Conv { w, b } | LayerParams::Dense { w, b } => {
                    *w = it.next().expect("flat params too short").clone().with_grad();
                    *b = it.next().expect("flat params too short").clone().with_grad();
                }
                LayerParams::BatchNorm { scale, shift, .. } => {
                    *scale = it.next().expect("flat params too short").clone().with_grad();
                    *shift = it.next().expect("flat params too short").clone().with_grad();
                }
                LayerParams::None => {}
            }
        }
        assert!(it.next().is_none(), "flat params too long");
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Tape handles for one forward lease of the parameters.
#[derive(Debug, Clone)]
pub enum LayerVars {
    Pair { w: Var, b: Var },
    Norm { scale: Var, shift: Var },
    None,
}

#[derive(Debug, Clone)]
pub struct TapeParams {
    pub layers: Vec<LayerVars>,
}

impl TapeParams {
    /// Leafs the current parameters onto a tape (trainable in Train mode).
    pub fn lease(state: &NetworkState, tape: &mut Tape) -> TapeParams {
        let trainable = state.mode == Mode::Train;
        let mut layers = Vec::with_capacity(state.params.len());
        for p in &state.params {
            layers.push(match p {
                LayerParams::Conv { w, b } | LayerParams::Dense { w, b } => LayerVars::Pair {
                    w: lease_one(tape, w, trainable),
                    b: lease_one(tape, b, trainable),
                },
                LayerParams::BatchNorm { scale, shift, .. } => LayerVars::Norm {
                    scale: lease_one(tape, scale, trainable),
                    shift: lease_one(tape, shift, trainable),
                },
                LayerParams::None => LayerVars::None,
            });
        }
        TapeParams { layers }
    }

    /// Adapts a flat var list (in `named_params` order) produced by an
    /// external caller such as the gradient checker.
    pub fn from_flat(state: &NetworkState, flat: &[Var]) -> TapeParams {
        let mut it = flat.iter().copied();
        let mut layers = Vec::with_capacity(state.params.len());
        for p in &state.params {
            layers.push(match p {
                LayerParams::Conv { .. } | LayerParams::Dense { .. } => LayerVars::Pair {
                    w: it.next().expect("flat vars too short"),
                    b: it.next().expect("flat vars too short"),
                },
                LayerParams::BatchNorm { .. } => LayerVars::Norm {
                    scale: it.next().expect("flat vars too short"),
                    shift: it.next().expect("flat vars too short"),
                },
                LayerParams::None => LayerVars::None,
            });
        }
        TapeParams { layers }
    }

    /// Flat var list matching `named_params` order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerVars::Pair { w, b } => {
                    out.push(*w);
                    out.push(*b);
                }
                LayerVars::Norm { scale, shift } => {
                    out.push(*scale);
                    out.push(*shift);
                }
                LayerVars::None => {}
            }
        }
        out
    }
}

fn lease_one(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

#[derive(Debug)]
pub struct ForwardResult {
    /// Final layer output (logits for classifiers).
    pub output: Var,
    pub taps: BTreeMap<String, Var>,
}

/// Runs the network on `x` ([batch, ...input_shape]), recording on `tape`.
///
/// Dropout masks are sampled once per call from `rng` in train mode; eval
/// mode is mask-free and uses running batch-norm statistics. Taps never
/// change the computation, only record handles.
pub fn forward_with_taps(
    state: &mut NetworkState,
    tape: &mut Tape,
    params: &TapeParams,
    x: Var,
    rng: &mut Rng,
) -> Result<ForwardResult, NnError> {
    let got = tape.shape(x).to_vec();
    if got.len() < 2 || got[1..] != state.spec.input_shape[..] {
        return Err(NnError::ShapeMismatch {
            detail: format!(
                "input {got:?} does not match spec {:?}",
                state.spec.input_shape
            ),
        });
    }
    let batch = got[0];
    let train = state.mode == Mode::Train;
    let mut cur = x;
    let mut outputs = Vec::with_capacity(state.spec.layers.len());
    for (i, layer) in state.spec.layers.iter().enumerate() {
        cur = match layer {
            LayerSpec::Conv { padding, .. } => {
                let LayerVars::Pair { w, b } = params.layers[i] else {
                    unreachable!("params aligned with spec");
                };
                let y = tape.conv2d(cur, w, *padding)?;
                tape.add_bias(y, b)?
            }
            LayerSpec::Dense { .. } => {
                let LayerVars::Pair { w, b } = params.layers[i] else {
                    unreachable!("params aligned with spec");
                };
                let flat_dim: usize = tape.shape(cur)[1..].iter().product();
                let flat = if tape.shape(cur).len() > 2 {
                    tape.reshape(cur, &[batch, flat_dim])?
                } else {
                    cur
                };
                let y = tape.matmul(flat, w)?;
                tape.add_bias(y, b)?
            }
            LayerSpec::Relu => tape.relu(cur),
            LayerSpec::MaxPool2x2 => tape.maxpool2x2(cur)?,
            LayerSpec::GlobalAvgPool => tape.global_avgpool(cur)?,
            LayerSpec::BatchNorm => {
                let LayerVars::Norm { scale, shift } = params.layers[i] else {
                    unreachable!("params aligned with spec");
                };
                if train {
                    let (y, mean, var) = tape.batchnorm(cur, scale, shift, BN_EPS)?;
                    if let LayerParams::BatchNorm {
                        running_mean,
                        running_var,
                        ..
                    } = &mut state.params[i]
                    {
                        for (r, m) in running_mean.iter_mut().zip(&mean) {
                            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
                        }
                        for (r, v) in running_var.iter_mut().zip(&var) {
                            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
                        }
                    }
                    y
                } else {
                    let LayerParams::BatchNorm {
                        scale: sc,
                        shift: sh,
                        running_mean,
                        running_var,
                    } = &state.params[i]
                    else {
                        unreachable!("params aligned with spec");
                    };
                    let mul: Vec<f64> = sc
                        .data()
                        .iter()
                        .zip(running_var)
                        .map(|(s, v)| s / (v + BN_EPS).sqrt())
                        .collect();
                    let add: Vec<f64> = sh
                        .data()
                        .iter()
                        .zip(running_mean.iter().zip(&mul))
                        .map(|(b, (m, mu))| b - m * mu)
                        .collect();
                    tape.channel_affine(cur, mul, add)?
                }
            }
            LayerSpec::Dropout { p } => {
                if train && *p > 0.0 {
                    let len = tape.value(cur).len();
                    let mask: Vec<f64> = (0..len)
                        .map(|_| if rng.next_f64() >= *p { 1.0 } else { 0.0 })
                        .collect();
                    tape.dropout_apply(cur, mask, *p)?
                } else {
                    cur
                }
            }
        };
        outputs.push(cur);
    }
    let mut taps = BTreeMap::new();
    for (name, &idx) in &state.spec.taps {
        taps.insert(name.clone(), outputs[idx]);
    }
    Ok(ForwardResult { output: cur, taps })
}

/// One-shot forward returning plain values (output and tap activations).
///
/// Builds a scratch tape internally; useful for evaluation and probes where
/// no gradients are needed.
pub fn forward_values(
    state: &mut NetworkState,
    x: &Tensor,
    rng: &mut Rng,
) -> Result<(Tensor, BTreeMap<String, Tensor>), NnError> {
    let mut tape = Tape::new();
    let params = TapeParams::lease(state, &mut tape);
    let xv = tape.constant(x.clone());
    let fw = forward_with_taps(state, &mut tape, &params, xv, rng)?;
    let out = tape.value(fw.output).clone();
    let taps = fw
        .taps
        .iter()
        .map(|(k, &v)| (k.clone(), tape.value(v).clone()))
        .collect();
    Ok((out, taps))
}

/// In-place SGD step: p <- p - lr * grad for every leased parameter.
pub fn sgd_step(state: &mut NetworkState, leased: &TapeParams, grads: &Gradients, lr: f64) {
    for (layer, vars) in state.params.iter_mut().zip(&leased.layers) {
        match (layer, vars) {
            (LayerParams::Conv { w, b }, LayerVars::Pair { w: wv, b: bv })
            | (LayerParams::Dense { w, b }, LayerVars::Pair { w: wv, b: bv }) => {
                apply_sgd(w, grads.get(*wv), lr);
                apply_sgd(b, grads.get(*bv), lr);
            }
            (
                LayerParams::BatchNorm { scale, shift, .. },
                LayerVars::Norm {
                    scale: sv,
                    shift: hv,
                },
            ) => {
                apply_sgd(scale, grads.get(*sv), lr);
                apply_sgd(shift, grads.get(*hv), lr);
            }
            (LayerParams::None, LayerVars::None) => {}
            _ => unreachable!("params aligned with spec"),
        }
    }
}

fn apply_sgd(p: &mut Tensor, g: Option<&Tensor>, lr: f64) {
    if let Some(g) = g {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
}

/// Inserts inverted dropout after every ReLU activation: `p_conv` while the
/// most recent parameterized layer is convolutional, `p_dense` once dense
/// layers begin. Probabilities of zero insert nothing.
pub fn dropout_baseline(
    spec: &NetworkSpec,
    p_conv: f64,
    p_dense: f64,
) -> Result<NetworkSpec, NnError> {
    for &p in &[p_conv, p_dense] {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::InvalidProbability { p });
        }
    }
    let mut out = NetworkSpec::new(&spec.input_shape);
    let mut in_dense = false;
    // Old layer index -> new layer index, to remap taps.
    let mut remap = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        if matches!(layer, LayerSpec::Dense { .. }) {
            in_dense = true;
        }
        out.layers.push(layer.clone());
        remap.push(out.layers.len() - 1);
        if matches!(layer, LayerSpec::Relu) {
            let p = if in_dense { p_dense } else { p_conv };
            if p > 0.0 {
                out.layers.push(LayerSpec::Dropout { p });
            }
        }
    }
    for (name, &idx) in &spec.taps {
        out.taps.insert(name.clone(), remap[idx]);
    }
    Ok(out)
}

/// The six-conv/three-dense 28x28 digit classifier, parameterized by a
/// channel width factor (1.0 = 150/300-channel convs with 1200/300 dense).
///
/// Taps `conv1`..`conv6` expose each convolutional block's output (after
/// ReLU and any pooling; `conv6` is the globally average-pooled vector).
pub fn digit_cnn(width_factor: f64, batchnorm: bool) -> NetworkSpec {
    let ch = |c: usize| -> usize { ((c as f64 * width_factor).round() as usize).max(1) };
    let block = |mut s: NetworkSpec, filters: usize, kernel: usize, padding: Padding| {
        s = s.conv(filters, kernel, padding);
        if batchnorm {
            s = s.batchnorm();
        }
        s.relu()
    };
    let mut spec = NetworkSpec::new(&[28, 28, 1]);
    spec = block(spec, ch(150), 3, Padding::Valid).tap("conv1");
    spec = block(spec, ch(150), 3, Padding::Valid).tap("conv2");
    spec = block(spec, ch(150), 5, Padding::Same).maxpool().tap("conv3");
    spec = block(spec, ch(300), 3, Padding::Valid).tap("conv4");
    spec = block(spec, ch(300), 3, Padding::Valid).tap("conv5");
    spec = block(spec, ch(300), 5, Padding::Same)
        .maxpool()
        .global_avgpool()
        .tap("conv6");
    spec.dense(ch(1200))
        .relu()
        .tap("dense1")
        .dense(ch(300))
        .relu()
        .tap("dense2")
        .dense(10)
}

/// Fully connected network: hidden layers with ReLU, linear output.
pub fn mlp(input_dim: usize, hidden: &[usize], out: usize) -> NetworkSpec {
    let mut spec = NetworkSpec::new(&[input_dim]);
    for &h in hidden {
        spec = spec.dense(h).relu();
    }
    spec.dense(out)
}

// ---------------------------------------------------------------------------
// Checkpoints: a textual named-tensor archive.
//
//   kflows-checkpoint v1
//   tensor <name> <rank> <dim0> <dim1> ...
//   <row-major values, space separated, round-trip formatted>
//
// Batch-norm running statistics are stored alongside trainable tensors.
// ---------------------------------------------------------------------------

pub fn save_checkpoint(state: &NetworkState, path: &Path) -> Result<(), NnError> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for (i, p) in state.params.iter().enumerate() {
        match p {
            LayerParams::Conv { w, b } | LayerParams::Dense { w, b } => {
                entries.push((format!("layer{i}.w"), w.shape().to_vec(), w.data().to_vec()));
                entries.push((format!("layer{i}.b"), b.shape().to_vec(), b.data().to_vec()));
            }
            LayerParams::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
            } => {
                entries.push((
                    format!("layer{i}.scale"),
                    scale.shape().to_vec(),
                    scale.data().to_vec(),
                ));
                entries.push((
                    format!("layer{i}.shift"),
                    shift.shape().to_vec(),
                    shift.data().to_vec(),
                ));
                entries.push((
                    format!("layer{i}.running_mean"),
                    vec![running_mean.len()],
                    running_mean.clone(),
                ));
                entries.push((
                    format!("layer{i}.running_var"),
                    vec![running_var.len()],
                    running_var.clone(),
                ));
            }
            LayerParams::None => {}
        }
    }
    let file = std::fs::File::create(path).map_err(|e| NnError::Io(e.to_string()))?;
    let mut out = std::io::BufWriter::new(file);
    (|| -> std::io::Result<()> {
        writeln!(out, "kflows-checkpoint v1")?;
        for (name, shape, data) in &entries {
            write!(out, "tensor {name} {}", shape.len())?;
            for d in shape {
                write!(out, " {d}")?;
            }
            writeln!(out)?;
            let mut first = true;
            for v in data {
                if !first {
                    write!(out, " ")?;
                }
                write!(out, "{v:?}")?;
                first = false;
            }
            writeln!(out)?;
        }
        Ok(())
    })()
    .map_err(|e| NnError::Io(e.to_string()))
}

/// Loads a checkpoint into a state built from the same spec; names and
/// shapes must match exactly.
pub fn load_checkpoint(state: &mut NetworkState, path: &Path) -> Result<(), NnError> {
    let file = std::fs::File::open(path).map_err(|e| NnError::Io(e.to_string()))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| NnError::Io(e.to_string()))?
        .unwrap_or_default();
    if header.trim() != "kflows-checkpoint v1" {
        return Err(NnError::Io(format!("bad checkpoint header '{header}'")));
    }
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    while let Some(line) = lines.next() {
        let line = line.map_err(|e| NnError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(NnError::Io(format!("expected tensor line, got '{line}'")));
        }
        let name = parts
            .next()
            .ok_or_else(|| NnError::Io("missing tensor name".into()))?
            .to_string();
        let rank: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| NnError::Io(format!("bad rank for {name}")))?;
        let shape: Vec<usize> = parts
            .take(rank)
            .map(|s| s.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| NnError::Io(format!("bad shape for {name}: {e}")))?;
        if shape.len() != rank {
            return Err(NnError::Io(format!("truncated shape for {name}")));
        }
        let values_line = lines
            .next()
            .transpose()
            .map_err(|e| NnError::Io(e.to_string()))?
            .ok_or_else(|| NnError::Io(format!("missing values for {name}")))?;
        let data: Vec<f64> = values_line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| NnError::Io(format!("bad value in {name}: {e}")))?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(NnError::Io(format!(
                "value count {} does not match shape {shape:?} for {name}",
                data.len()
            )));
        }
        tensors.insert(name, (shape, data));
    }

    let mut fetch = |name: String, shape: &[usize]| -> Result<Vec<f64>, NnError> {
        let (s, d) = tensors
            .remove(&name)
            .ok_or_else(|| NnError::Io(format!("checkpoint missing {name}")))?;
        if s != shape {
            return Err(NnError::Io(format!(
                "shape of {name} is {s:?}, expected {shape:?}"
            )));
        }
        Ok(d)
    };
    for (i, p) in state.params.iter_mut().enumerate() {
        match p {
            LayerParams::Conv { w, b } | LayerParams::Dense { w, b } => {
                let wd = fetch(format!("layer{i}.w"), w.shape())?;
                w.data_mut().copy_from_slice(&wd);
                let bd = fetch(format!("layer{i}.b"), b.shape())?;
                b.data_mut().copy_from_slice(&bd);
            }
            LayerParams::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
            } => {
                let sd = fetch(format!("layer{i}.scale"), scale.shape())?;
                scale.data_mut().copy_from_slice(&sd);
                let hd = fetch(format!("layer{i}.shift"), shift.shape())?;
                shift.data_mut().copy_from_slice(&hd);
                *running_mean = fetch(format!("layer{i}.running_mean"), &[running_mean.len()])?;
                *running_var = fetch(format!("layer{i}.running_var"), &[running_var.len()])?;
            }
            LayerParams::None => {}
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(NnError::Io(format!("unexpected tensor {extra}")));
    }
    Ok(())
}
