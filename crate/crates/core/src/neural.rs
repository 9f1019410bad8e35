//! Small convolutional predictors with hand-written reverse mode.
//!
//! Every network shares the same trunk: fixed input standardisation followed
//! by stride-1, zero-padded convolutions with ReLU. The trunk keeps the grid
//! resolution, so each output cell lines up with a planning vertex. Three heads
//! sit on top:
//!
//! * [`Head::Cost`]: a 1×1 convolution to `T` channels and an absolute value,
//!   giving nonnegative costs for every (plan step, vertex).
//! * [`Head::Position`]: two linear readouts over the flattened features,
//!   producing start and goal logits over vertices.
//! * [`Head::Action`]: one linear readout producing action logits.
//!
//! Convolutions are lowered to matrix products over an im2col patch buffer,
//! which the tape keeps for the backward pass.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::Normalization;
use crate::gridworld::{Observation, OBS_CHANNELS};
use crate::tdsp::CostTensor;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "empty extent in shape {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Head {
    Cost { horizon: usize },
    Position,
    Action { num_actions: usize },
}

/// Architecture of one network.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDescription {
    pub head: Head,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub trunk_channels: Vec<usize>,
    pub kernel_size: usize,
}

impl NetworkDescription {
    /// Default trunk: two 3×3 layers of 16 channels.
    pub fn new(head: Head, height: usize, width: usize) -> Self {
        Self {
            head,
            height,
            width,
            in_channels: OBS_CHANNELS,
            trunk_channels: vec![16, 16],
            kernel_size: 3,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    fn feature_channels(&self) -> usize {
        self.trunk_channels
            .last()
            .copied()
            .unwrap_or(self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.height == 0 || self.width == 0 || self.in_channels == 0 {
            return bad("network input must be nonempty".into());
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad(format!(
                "kernel size must be odd to preserve resolution, got {}",
                self.kernel_size
            ));
        }
        if self.trunk_channels.contains(&0) {
            return bad("trunk layers need at least one channel".into());
        }
        match self.head {
            Head::Cost { horizon: 0 } => bad("cost head needs a positive horizon".into()),
            Head::Action { num_actions: 0 } => bad("action head needs actions".into()),
            _ => Ok(()),
        }
    }

    /// Parameter names and shapes in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel_size;
        let mut shapes = Vec::new();
        let mut c_in = self.in_channels;
        for (i, &c_out) in self.trunk_channels.iter().enumerate() {
            shapes.push((format!("conv{i}.weight"), vec![c_out, c_in, k, k]));
            shapes.push((format!("conv{i}.bias"), vec![c_out]));
            c_in = c_out;
        }
        let flat = c_in * self.cells();
        match self.head {
            Head::Cost { horizon } => {
                shapes.push(("cost.weight".into(), vec![horizon, c_in, 1, 1]));
                shapes.push(("cost.bias".into(), vec![horizon]));
            }
            Head::Position => {
                let v = self.cells();
                shapes.push(("start.weight".into(), vec![v, flat]));
                shapes.push(("start.bias".into(), vec![v]));
                shapes.push(("goal.weight".into(), vec![v, flat]));
                shapes.push(("goal.bias".into(), vec![v]));
            }
            Head::Action { num_actions } => {
                shapes.push(("action.weight".into(), vec![num_actions, flat]));
                shapes.push(("action.bias".into(), vec![num_actions]));
            }
        }
        shapes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(flatten)]
    pub tensor: Tensor,
}

/// Trainable parameters plus the fixed input standardisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub description: NetworkDescription,
    pub normalization: Normalization,
    pub tensors: Vec<NamedTensor>,
}

/// Per-parameter gradients, aligned with [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients(
            params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.tensor.shape.clone()))
                .collect(),
        )
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

impl ModelParams {
    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    fn tensor(&self, i: usize) -> &[f64] {
        &self.tensors[i].tensor.data
    }

    pub fn validate(&self) -> Result<()> {
        self.description.validate()?;
        let shapes = self.description.parameter_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "description needs {} tensors, found {}",
                shapes.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&self.tensors) {
            if &t.name != name
                || &t.tensor.shape != shape
                || t.tensor.len() != shape.iter().product::<usize>()
            {
                return Err(Error::InvalidArgument(format!(
                    "tensor {} {:?} does not match {name} {shape:?}",
                    t.name, t.tensor.shape
                )));
            }
            if t.tensor.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "tensor {name} is not finite"
                )));
            }
        }
        let c = self.description.in_channels;
        if self.normalization.mean.len() != c || self.normalization.var.len() != c {
            return Err(Error::InvalidArgument(format!(
                "normalization must cover {c} channels"
            )));
        }
        Ok(())
    }
}

/// Weights uniform in `[-b, b]` with `b = sqrt(1 / fan_in)`; biases zero.
pub fn init_params(
    description: &NetworkDescription,
    normalization: Normalization,
    seed: u64,
) -> Result<ModelParams> {
    description.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = description
        .parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            };
            NamedTensor {
                name,
                tensor: Tensor { shape, data },
            }
        })
        .collect();
    let params = ModelParams {
        description: description.clone(),
        normalization,
        tensors,
    };
    params.validate()?;
    Ok(params)
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    head: Head,
    /// im2col buffer of each trunk layer's input.
    patches: Vec<Vec<f64>>,
    /// Pre-ReLU outputs of each trunk layer.
    pre_relu: Vec<Vec<f64>>,
    /// Trunk output after the last ReLU, `[channels, cells]`.
    features: Vec<f64>,
    /// Cost head output before the absolute value.
    pre_abs: Vec<f64>,
}

impl Tape {
    /// Smallest magnitude among all values that pass through a ReLU or an
    /// absolute value; small values flag inputs near a kink.
    pub fn min_abs_kink_input(&self) -> f64 {
        self.pre_relu
            .iter()
            .flatten()
            .chain(&self.pre_abs)
            .fold(f64::INFINITY, |m, x| m.min(x.abs()))
    }

    /// Sign pattern of every kink input.
    pub fn kink_signature(&self) -> Vec<bool> {
        self.pre_relu
            .iter()
            .flatten()
            .chain(&self.pre_abs)
            .map(|&x| x > 0.0)
            .collect()
    }
}

struct ConvShape {
    c_in: usize,
    height: usize,
    width: usize,
    kernel: usize,
}

impl ConvShape {
    fn cells(&self) -> usize {
        self.height * self.width
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

fn im2col(input: &[f64], s: &ConvShape) -> Vec<f64> {
    let (h, w, k) = (s.height, s.width, s.kernel);
    let pad = k / 2;
    let cells = s.cells();
    let mut patches = vec![0.0; s.rows() * cells];
    for ci in 0..s.c_in {
        let plane = &input[ci * cells..(ci + 1) * cells];
        for ky in 0..k {
            for kx in 0..k {
                let j = (ci * k + ky) * k + kx;
                let row = &mut patches[j * cells..(j + 1) * cells];
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let src = (sy - pad) * w;
                    for x in 0..w {
                        let sx = x + kx;
                        if sx >= pad && sx - pad < w {
                            row[y * w + x] = plane[src + sx - pad];
                        }
                    }
                }
            }
        }
    }
    patches
}

fn col2im(dpatches: &[f64], s: &ConvShape) -> Vec<f64> {
    let (h, w, k) = (s.height, s.width, s.kernel);
    let pad = k / 2;
    let cells = s.cells();
    let mut dx = vec![0.0; s.c_in * cells];
    for ci in 0..s.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let j = (ci * k + ky) * k + kx;
                let row = &dpatches[j * cells..(j + 1) * cells];
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let dst = ci * cells + (sy - pad) * w;
                    for x in 0..w {
                        let sx = x + kx;
                        if sx >= pad && sx - pad < w {
                            dx[dst + sx - pad] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `out[o][p] = bias[o] + sum_j weight[o][j] * cols[j][p]`.
fn matmul_bias(weight: &[f64], bias: &[f64], cols: &[f64], rows: usize, cells: usize) -> Vec<f64> {
    let outs = bias.len();
    let mut out = vec![0.0; outs * cells];
    for o in 0..outs {
        let dst = &mut out[o * cells..(o + 1) * cells];
        dst.fill(bias[o]);
        let wrow = &weight[o * rows..(o + 1) * rows];
        for (j, &wj) in wrow.iter().enumerate() {
            let src = &cols[j * cells..(j + 1) * cells];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wj * s;
            }
        }
    }
    out
}

/// Backward of [`matmul_bias`]: returns `(dweight, dbias, dcols)`; `dcols`
/// is skipped when not needed.
fn matmul_bias_backward(
    weight: &[f64],
    cols: &[f64],
    dout: &[f64],
    rows: usize,
    cells: usize,
    need_dcols: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let outs = dout.len() / cells;
    let mut dweight = vec![0.0; outs * rows];
    let mut dbias = vec![0.0; outs];
    let mut dcols = if need_dcols {
        vec![0.0; rows * cells]
    } else {
        Vec::new()
    };
    for o in 0..outs {
        let drow = &dout[o * cells..(o + 1) * cells];
        dbias[o] = drow.iter().sum();
        let wrow = &weight[o * rows..(o + 1) * rows];
        let dwrow = &mut dweight[o * rows..(o + 1) * rows];
        for j in 0..rows {
            let src = &cols[j * cells..(j + 1) * cells];
            dwrow[j] = src.iter().zip(drow).map(|(a, b)| a * b).sum();
            if need_dcols {
                let wj = wrow[j];
                let dst = &mut dcols[j * cells..(j + 1) * cells];
                for (d, g) in dst.iter_mut().zip(drow) {
                    *d += wj * g;
                }
            }
        }
    }
    (dweight, dbias, dcols)
}

/// `out[o] = bias[o] + sum_i weight[o][i] * x[i]`.
fn linear(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            let row = &weight[o * x.len()..(o + 1) * x.len()];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

/// Accumulates the gradients of [`linear`] into `dweight`, `dbias`, `dx`.
fn linear_backward(
    weight: &[f64],
    x: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let n = x.len();
    for (o, &g) in dout.iter().enumerate() {
        dbias[o] += g;
        if g == 0.0 {
            continue;
        }
        let dwrow = &mut dweight[o * n..(o + 1) * n];
        for (d, v) in dwrow.iter_mut().zip(x) {
            *d += g * v;
        }
        let wrow = &weight[o * n..(o + 1) * n];
        for (d, w) in dx.iter_mut().zip(wrow) {
            *d += g * w;
        }
    }
}

fn check_input(params: &ModelParams, obs: &Observation) -> Result<()> {
    let d = &params.description;
    if obs.height != d.height || obs.width != d.width || obs.data.len() != d.in_channels * d.cells()
    {
        return Err(Error::InvalidArgument(format!(
            "observation {}x{} with {} values does not fit a {}x{}x{} network",
            obs.height,
            obs.width,
            obs.data.len(),
            d.in_channels,
            d.height,
            d.width
        )));
    }
    Ok(())
}

fn trunk_forward(params: &ModelParams, obs: &Observation, head: Head) -> Result<Tape> {
    check_input(params, obs)?;
    if params.description.head != head {
        return Err(Error::InvalidArgument(format!(
            "parameters describe a {:?} head, not {head:?}",
            params.description.head
        )));
    }
    let d = &params.description;
    let cells = d.cells();
    let norm = &params.normalization;
    let mut x: Vec<f64> = obs
        .data
        .chunks(cells)
        .enumerate()
        .flat_map(|(c, plane)| {
            let (m, s) = (norm.mean[c], norm.scale(c));
            plane.iter().map(move |v| (v - m) * s)
        })
        .collect();

    let mut patches = Vec::with_capacity(d.trunk_channels.len());
    let mut pre_relu = Vec::with_capacity(d.trunk_channels.len());
    let mut c_in = d.in_channels;
    for (i, &c_out) in d.trunk_channels.iter().enumerate() {
        let shape = ConvShape {
            c_in,
            height: d.height,
            width: d.width,
            kernel: d.kernel_size,
        };
        let cols = im2col(&x, &shape);
        let pre = matmul_bias(
            params.tensor(2 * i),
            params.tensor(2 * i + 1),
            &cols,
            shape.rows(),
            cells,
        );
        x = pre.iter().map(|&v| v.max(0.0)).collect();
        patches.push(cols);
        pre_relu.push(pre);
        c_in = c_out;
    }
    Ok(Tape {
        head,
        patches,
        pre_relu,
        features: x,
        pre_abs: Vec::new(),
    })
}

fn head_offset(d: &NetworkDescription) -> usize {
    2 * d.trunk_channels.len()
}

/// Predicted costs, nonnegative, with one row per plan step.
pub fn cost_net_forward(params: &ModelParams, obs: &Observation) -> Result<(CostTensor, Tape)> {
    let d = &params.description;
    let Head::Cost { horizon } = d.head else {
        return Err(Error::InvalidArgument("not a cost network".into()));
    };
    let mut tape = trunk_forward(params, obs, d.head)?;
    let h = head_offset(d);
    let pre = matmul_bias(
        params.tensor(h),
        params.tensor(h + 1),
        &tape.features,
        d.feature_channels(),
        d.cells(),
    );
    let costs = CostTensor::new(horizon, d.cells(), pre.iter().map(|v| v.abs()).collect())?;
    tape.pre_abs = pre;
    Ok((costs, tape))
}

/// Start and goal logits over vertices.
pub fn position_net_forward(
    params: &ModelParams,
    obs: &Observation,
) -> Result<(Vec<f64>, Vec<f64>, Tape)> {
    let d = &params.description;
    if d.head != Head::Position {
        return Err(Error::InvalidArgument("not a position network".into()));
    }
    let tape = trunk_forward(params, obs, d.head)?;
    let h = head_offset(d);
    let start = linear(params.tensor(h), params.tensor(h + 1), &tape.features);
    let goal = linear(params.tensor(h + 2), params.tensor(h + 3), &tape.features);
    Ok((start, goal, tape))
}

/// Action logits in [`crate::tdsp::Action`] declaration order.
pub fn action_net_forward(params: &ModelParams, obs: &Observation) -> Result<(Vec<f64>, Tape)> {
    let d = &params.description;
    if !matches!(d.head, Head::Action { .. }) {
        return Err(Error::InvalidArgument("not an action network".into()));
    }
    let tape = trunk_forward(params, obs, d.head)?;
    let h = head_offset(d);
    let logits = linear(params.tensor(h), params.tensor(h + 1), &tape.features);
    Ok((logits, tape))
}

/// Gradient of a scalar loss with respect to a network's outputs.
#[derive(Debug, Clone, Copy)]
pub enum Upstream<'a> {
    Cost(&'a CostTensor),
    Position { start: &'a [f64], goal: &'a [f64] },
    Action(&'a [f64]),
}

/// Reverse-mode gradients for every parameter. The absolute value's
/// subgradient at zero is zero; so is ReLU's.
pub fn backprop(params: &ModelParams, tape: &Tape, upstream: Upstream<'_>) -> Result<Gradients> {
    let d = &params.description;
    if tape.head != d.head || tape.patches.len() != d.trunk_channels.len() {
        return Err(Error::InvalidArgument(
            "tape does not belong to these parameters".into(),
        ));
    }
    let cells = d.cells();
    let feat_c = d.feature_channels();
    let h = head_offset(d);
    let mut grads = Gradients::zeros_like(params);
    let mut dfeat = vec![0.0; feat_c * cells];

    match (d.head, upstream) {
        (Head::Cost { horizon }, Upstream::Cost(g)) => {
            if !g.same_shape(horizon, cells) {
                return Err(Error::InvalidArgument(format!(
                    "cost gradient is {}x{}, expected {horizon}x{cells}",
                    g.horizon(),
                    g.num_vertices()
                )));
            }
            let dpre: Vec<f64> = g
                .values()
                .iter()
                .zip(&tape.pre_abs)
                .map(|(gv, &p)| {
                    if p > 0.0 {
                        *gv
                    } else if p < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
                .collect();
            let (dw, db, dcols) =
                matmul_bias_backward(params.tensor(h), &tape.features, &dpre, feat_c, cells, true);
            grads.0[h].data = dw;
            grads.0[h + 1].data = db;
            dfeat = dcols;
        }
        (Head::Position, Upstream::Position { start, goal }) => {
            if start.len() != cells || goal.len() != cells {
                return Err(Error::InvalidArgument(format!(
                    "position gradients must have {cells} entries"
                )));
            }
            for (k, g) in [start, goal].into_iter().enumerate() {
                let (left, right) = grads.0.split_at_mut(h + 2 * k + 1);
                linear_backward(
                    params.tensor(h + 2 * k),
                    &tape.features,
                    g,
                    &mut left[h + 2 * k].data,
                    &mut right[0].data,
                    &mut dfeat,
                );
            }
        }
        (Head::Action { num_actions }, Upstream::Action(g)) => {
            if g.len() != num_actions {
                return Err(Error::InvalidArgument(format!(
                    "action gradient must have {num_actions} entries"
                )));
            }
            let (left, right) = grads.0.split_at_mut(h + 1);
            linear_backward(
                params.tensor(h),
                &tape.features,
                g,
                &mut left[h].data,
                &mut right[0].data,
                &mut dfeat,
            );
        }
        _ => {
            return Err(Error::InvalidArgument(
                "upstream gradient does not match the network head".into(),
            ))
        }
    }

    // Trunk, last layer first.
    let mut dout = dfeat;
    let channels = &d.trunk_channels;
    for i in (0..channels.len()).rev() {
        let c_in = if i == 0 {
            d.in_channels
        } else {
            channels[i - 1]
        };
        let shape = ConvShape {
            c_in,
            height: d.height,
            width: d.width,
            kernel: d.kernel_size,
        };
        for (g, &p) in dout.iter_mut().zip(&tape.pre_relu[i]) {
            if p <= 0.0 {
                *g = 0.0;
            }
        }
        let (dw, db, dcols) = matmul_bias_backward(
            params.tensor(2 * i),
            &tape.patches[i],
            &dout,
            shape.rows(),
            cells,
            i > 0,
        );
        grads.0[2 * i].data = dw;
        grads.0[2 * i + 1].data = db;
        if i > 0 {
            dout = col2im(&dcols, &shape);
        }
    }
    Ok(grads)
}

/// Mean of the per-label cross-entropies of `softmax(logits)`, with its
/// gradient in the logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("label set is empty".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.len()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let log_z = max + z.ln();
    let k = labels.len() as f64;
    let loss = labels.iter().map(|&l| log_z - logits[l]).sum::<f64>() / k;
    let mut grad: Vec<f64> = exp.iter().map(|e| e / z).collect();
    for &l in labels {
        grad[l] -= 1.0 / k;
    }
    Ok((loss, grad))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Adam moments and step counter for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = Gradients::zeros_like(params).0;
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ModelParams,
    grads: &Gradients,
    learning_rate: f64,
) -> Result<()> {
    let aligned = grads.0.len() == params.tensors.len()
        && state.first_moment.len() == params.tensors.len()
        && params
            .tensors
            .iter()
            .zip(&grads.0)
            .zip(&state.first_moment)
            .all(|((p, g), m)| p.tensor.shape == g.shape && p.tensor.shape == m.shape);
    if !aligned {
        return Err(Error::InvalidArgument(
            "gradients or optimizer state do not match the parameters".into(),
        ));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let correction1 = 1.0 - b1.powi(state.step as i32);
    let correction2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.tensors.iter_mut().enumerate() {
        let g = &grads.0[i].data;
        let m = &mut state.first_moment[i].data;
        let v = &mut state.second_moment[i].data;
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / correction1;
            let v_hat = v[j] / correction2;
            p.tensor.data[j] -= learning_rate * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn observation(d: &NetworkDescription, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Observation {
            height: d.height,
            width: d.width,
            data: (0..d.in_channels * d.cells())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        }
    }

    fn zeroed(mut p: ModelParams) -> ModelParams {
        for t in &mut p.tensors {
            t.tensor.data.fill(0.0);
        }
        p
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let d = NetworkDescription::new(Head::Cost { horizon: 4 }, 5, 5);
        let a = init_params(&d, Normalization::identity(6), 3).unwrap();
        let b = init_params(&d, Normalization::identity(6), 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&d, Normalization::identity(6), 4).unwrap());
        for t in &a.tensors {
            if t.name.ends_with(".bias") {
                assert!(t.tensor.data.iter().all(|&x| x == 0.0));
            } else {
                let fan_in: usize = t.tensor.shape[1..].iter().product();
                let bound = (1.0 / fan_in as f64).sqrt();
                assert!(t.tensor.data.iter().all(|x| x.abs() <= bound));
            }
        }
    }

    #[test]
    fn invalid_descriptions() {
        let mut d = NetworkDescription::new(Head::Cost { horizon: 0 }, 5, 5);
        assert!(init_params(&d, Normalization::identity(6), 0).is_err());
        d.head = Head::Position;
        d.kernel_size = 4;
        assert!(init_params(&d, Normalization::identity(6), 0).is_err());
        d.kernel_size = 3;
        assert!(init_params(&d, Normalization::identity(5), 0).is_err());
    }

    #[test]
    fn cost_head_shapes_and_sign() {
        let d = NetworkDescription::new(Head::Cost { horizon: 4 }, 5, 5);
        let p = init_params(&d, Normalization::identity(6), 1).unwrap();
        let obs = observation(&d, 2);
        let (c, _) = cost_net_forward(&p, &obs).unwrap();
        assert_eq!((c.horizon(), c.num_vertices()), (4, 25));
        assert!(c.values().iter().all(|&x| x >= 0.0));

        let (z, _) = cost_net_forward(&zeroed(p), &obs).unwrap();
        assert!(z.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn position_head_zero_params_uniform() {
        let d = NetworkDescription::new(Head::Position, 5, 5);
        let p = zeroed(init_params(&d, Normalization::identity(6), 1).unwrap());
        let (s, g, _) = position_net_forward(&p, &observation(&d, 0)).unwrap();
        assert_eq!((s.len(), g.len()), (25, 25));
        let probs = softmax(&s);
        assert!(probs.iter().all(|&x| (x - 1.0 / 25.0).abs() < 1e-15));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let d = NetworkDescription::new(Head::Cost { horizon: 2 }, 5, 5);
        let p = init_params(&d, Normalization::identity(6), 1).unwrap();
        let obs = Observation {
            height: 4,
            width: 5,
            data: vec![0.0; 6 * 20],
        };
        assert!(cost_net_forward(&p, &obs).is_err());
        assert!(position_net_forward(&p, &observation(&d, 0)).is_err());
        let (_, tape) = cost_net_forward(&p, &observation(&d, 0)).unwrap();
        let wrong = CostTensor::zeros(3, 25).unwrap();
        assert!(backprop(&p, &tape, Upstream::Cost(&wrong)).is_err());
        assert!(backprop(&p, &tape, Upstream::Action(&[0.0; 5])).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let d = NetworkDescription::new(Head::Cost { horizon: 3 }, 4, 4);
        let p = init_params(&d, Normalization::identity(6), 1).unwrap();
        let (_, tape) = cost_net_forward(&p, &observation(&d, 5)).unwrap();
        let g = backprop(
            &p,
            &tape,
            Upstream::Cost(&CostTensor::zeros(3, 16).unwrap()),
        )
        .unwrap();
        assert!(g.0.iter().all(|t| t.data.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn im2col_round_trip_adjoint() {
        // <im2col(x), P> == <x, col2im(P)> for arbitrary x and P.
        let s = ConvShape {
            c_in: 2,
            height: 3,
            width: 4,
            kernel: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..2 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..s.rows() * 12)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let lhs: f64 = im2col(&x, &s).iter().zip(&p).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&p, &s)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, grad) = softmax_cross_entropy(&[0.0; 25], &[3]).unwrap();
        assert!((loss - 25f64.ln()).abs() < 1e-12);
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);

        let mut logits = vec![0.0; 5];
        logits[2] = 60.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss < 1e-20);

        let (set_loss, set_grad) = softmax_cross_entropy(&[1.0, 2.0, 3.0], &[0, 2]).unwrap();
        let (l0, g0) = softmax_cross_entropy(&[1.0, 2.0, 3.0], &[0]).unwrap();
        let (l2, g2) = softmax_cross_entropy(&[1.0, 2.0, 3.0], &[2]).unwrap();
        assert!((set_loss - (l0 + l2) / 2.0).abs() < 1e-12);
        for i in 0..3 {
            assert!((set_grad[i] - (g0[i] + g2[i]) / 2.0).abs() < 1e-12);
        }
        assert!(softmax_cross_entropy(&[0.0; 3], &[]).is_err());
        assert!(softmax_cross_entropy(&[0.0; 3], &[3]).is_err());
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    fn scalar_params(value: f64) -> ModelParams {
        // A position net on a 1x1 grid without trunk: two scalar weights and
        // two scalar biases.
        let d = NetworkDescription {
            head: Head::Position,
            height: 1,
            width: 1,
            in_channels: 1,
            trunk_channels: vec![],
            kernel_size: 1,
        };
        let mut p = init_params(&d, Normalization::identity(1), 0).unwrap();
        for t in &mut p.tensors {
            t.tensor.data.fill(value);
        }
        p
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = scalar_params(0.5);
        let before = p.clone();
        let mut state = AdamState::new(&p);
        adam_step(&mut state, &mut p, &Gradients::zeros_like(&before), 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = scalar_params(0.5);
        let mut state = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.0[0].data[0] = 1.0;
        adam_step(&mut state, &mut p, &g, 1e-3).unwrap();
        let moved = 0.5 - p.tensors[0].tensor.data[0];
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((moved - 1e-3).abs() < 1e-6);
        assert_eq!(p.tensors[1].tensor.data[0], 0.5);
    }

    #[test]
    fn adam_rejects_mismatch() {
        let mut p = scalar_params(0.5);
        let mut state = AdamState::new(&p);
        let g = Gradients(vec![Tensor::zeros(vec![2])]);
        assert!(adam_step(&mut state, &mut p, &g, 1e-3).is_err());
    }
}
