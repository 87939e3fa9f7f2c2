//! Replaceable output heads.
//!
//! A head turns a user's ordered batch embeddings into one representation
//! `h_final`, which feeds five linear classifiers: one 2-way classifier per
//! MBTI axis and one 16-way type classifier. Two trunks are provided: a
//! stacked GRU and mean-pooling followed by a linear map. Both have analytic
//! gradients (back-propagation through time for the GRU).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Decoder, Encoder};
use crate::dataset::Axis;
use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, Matrix};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PHED";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Gru,
    MeanPool,
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(HeadKind::Gru),
            "meanpool" | "mean_pool" => Ok(HeadKind::MeanPool),
            other => Err(Error::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Gru => "gru",
            HeadKind::MeanPool => "meanpool",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Stacked GRU layers; ignored by the mean-pool head.
    pub layers: usize,
    /// Inverted-dropout probability between stacked layers.
    pub dropout_p: f64,
    pub seed: u64,
}

impl HeadConfig {
    pub fn gru(input_dim: usize) -> Self {
        HeadConfig {
            kind: HeadKind::Gru,
            input_dim,
            hidden_dim: 512,
            layers: 3,
            dropout_p: 0.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("head needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }
}

/// Which classifier to read out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassifierTask {
    Dim(Axis),
    Type16,
}

impl ClassifierTask {
    pub fn classes(self) -> usize {
        match self {
            ClassifierTask::Dim(_) => 2,
            ClassifierTask::Type16 => 16,
        }
    }
}

impl FromStr for ClassifierTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('/', "").as_str() {
            "EI" => Ok(ClassifierTask::Dim(Axis::EI)),
            "SN" => Ok(ClassifierTask::Dim(Axis::SN)),
            "TF" => Ok(ClassifierTask::Dim(Axis::TF)),
            "JP" => Ok(ClassifierTask::Dim(Axis::JP)),
            "TYPE16" => Ok(ClassifierTask::Type16),
            _ => Err(Error::Config(format!("unknown classifier task {s:?}"))),
        }
    }
}

/// One GRU layer. Gate blocks are stacked in the order update (z), reset (r),
/// candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct GruLayer {
    /// `3·hidden × input`
    pub w_input: Matrix,
    /// `3·hidden × hidden`
    pub w_recur: Matrix,
    /// `3·hidden`
    pub bias: Vec<f64>,
}

impl GruLayer {
    pub fn hidden(&self) -> usize {
        self.w_recur.cols()
    }

    pub fn input(&self) -> usize {
        self.w_input.cols()
    }

    fn zeros(input: usize, hidden: usize) -> Self {
        GruLayer {
            w_input: Matrix::zeros(3 * hidden, input),
            w_recur: Matrix::zeros(3 * hidden, hidden),
            bias: vec![0.0; 3 * hidden],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(out: usize, input: usize) -> Self {
        Linear {
            weight: Matrix::zeros(out, input),
            bias: vec![0.0; out],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        self.weight.matvec_acc(x, &mut y);
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Trunk {
    Gru(Vec<GruLayer>),
    MeanPool(Linear),
}

/// Parameters of a head plus its classifiers. Also used as the gradient
/// container, with identical shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub config: HeadConfig,
    pub trunk: Trunk,
    /// Indexed by [`Axis::index`].
    pub dims: [Linear; 4],
    pub type16: Linear,
}

impl HeadParams {
    /// Same shapes as `config` describes, all zeros.
    pub fn zeros(config: &HeadConfig) -> Self {
        let h = config.hidden_dim;
        let trunk = match config.kind {
            HeadKind::Gru => Trunk::Gru(
                (0..config.layers)
                    .map(|l| GruLayer::zeros(if l == 0 { config.input_dim } else { h }, h))
                    .collect(),
            ),
            HeadKind::MeanPool => Trunk::MeanPool(Linear::zeros(h, config.input_dim)),
        };
        HeadParams {
            config: config.clone(),
            trunk,
            dims: std::array::from_fn(|_| Linear::zeros(2, h)),
            type16: Linear::zeros(16, h),
        }
    }

    pub fn zeros_like(&self) -> Self {
        HeadParams::zeros(&self.config)
    }

    pub fn classifier(&self, task: ClassifierTask) -> &Linear {
        match task {
            ClassifierTask::Dim(axis) => &self.dims[axis.index()],
            ClassifierTask::Type16 => &self.type16,
        }
    }

    fn classifier_mut(&mut self, task: ClassifierTask) -> &mut Linear {
        match task {
            ClassifierTask::Dim(axis) => &mut self.dims[axis.index()],
            ClassifierTask::Type16 => &mut self.type16,
        }
    }

    /// All tensors in the fixed checkpoint order: trunk (per GRU layer:
    /// input weights, recurrent weights, bias; or mean-pool weight, bias),
    /// then the E/I, S/N, T/F, J/P classifiers (weight, bias), then the
    /// 16-way classifier (weight, bias).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        match &self.trunk {
            Trunk::Gru(layers) => {
                for l in layers {
                    out.extend([l.w_input.as_slice(), l.w_recur.as_slice(), &l.bias]);
                }
            }
            Trunk::MeanPool(lin) => out.extend([lin.weight.as_slice(), &lin.bias]),
        }
        for lin in self.dims.iter().chain(std::iter::once(&self.type16)) {
            out.extend([lin.weight.as_slice(), &lin.bias]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match &mut self.trunk {
            Trunk::Gru(layers) => {
                for l in layers {
                    out.push(l.w_input.as_mut_slice());
                    out.push(l.w_recur.as_mut_slice());
                    out.push(&mut l.bias);
                }
            }
            Trunk::MeanPool(lin) => {
                out.push(lin.weight.as_mut_slice());
                out.push(&mut lin.bias);
            }
        }
        for lin in self.dims.iter_mut().chain(std::iter::once(&mut self.type16)) {
            out.push(lin.weight.as_mut_slice());
            out.push(&mut lin.bias);
        }
        out
    }

    /// Fan-in used for the init bound of each tensor, in [`tensors`](Self::tensors) order.
    pub fn fan_ins(&self) -> Vec<usize> {
        let h = self.config.hidden_dim;
        let mut out = Vec::new();
        match &self.trunk {
            Trunk::Gru(layers) => {
                for l in layers {
                    out.extend([l.input(), h, h]);
                }
            }
            Trunk::MeanPool(_) => out.extend([self.config.input_dim, self.config.input_dim]),
        }
        out.extend(std::iter::repeat_n(h, 10));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Writes a checkpoint. `task` records which classifiers were trained.
    pub fn save(&self, task: TrainedTask, path: &Path) -> Result<()> {
        let c = &self.config;
        let mut enc = Encoder::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        enc.u8(match c.kind {
            HeadKind::Gru => 0,
            HeadKind::MeanPool => 1,
        });
        enc.u32(c.input_dim as u32);
        enc.u32(c.hidden_dim as u32);
        enc.u32(c.layers as u32);
        enc.f64(c.dropout_p);
        enc.u64(c.seed);
        enc.u8(task as u8);
        let tensors = self.tensors();
        enc.u32(tensors.len() as u32);
        for t in tensors {
            enc.u64(t.len() as u64);
            enc.f64s(t);
        }
        enc.finish(path)
    }

    pub fn load(path: &Path) -> Result<(Self, TrainedTask)> {
        let mut dec = Decoder::open(path, CHECKPOINT_MAGIC, "head checkpoint", CHECKPOINT_VERSION)?;
        let kind = match dec.u8()? {
            0 => HeadKind::Gru,
            1 => HeadKind::MeanPool,
            k => return Err(dec.corrupt(format!("unknown head kind {k}"))),
        };
        let config = HeadConfig {
            kind,
            input_dim: dec.u32()? as usize,
            hidden_dim: dec.u32()? as usize,
            layers: dec.u32()? as usize,
            dropout_p: dec.f64()?,
            seed: dec.u64()?,
        };
        config.validate().map_err(|e| dec.corrupt(e.to_string()))?;
        let task = match dec.u8()? {
            0 => TrainedTask::Dims,
            1 => TrainedTask::Type16,
            t => return Err(dec.corrupt(format!("unknown task tag {t}"))),
        };
        let mut params = HeadParams::zeros(&config);
        let count = dec.u32()? as usize;
        let expected = params.tensors().len();
        if count != expected {
            return Err(dec.corrupt(format!("{count} tensors, expected {expected}")));
        }
        for tensor in params.tensors_mut() {
            let len = dec.u64()? as usize;
            if len != tensor.len() {
                return Err(dec.corrupt(format!("tensor of {len} values, expected {}", tensor.len())));
            }
            tensor.copy_from_slice(&dec.f64s(len)?);
        }
        dec.finish()?;
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("{}: checkpoint parameters", path.display())));
        }
        Ok((params, task))
    }
}

/// Which classifiers a checkpoint was trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainedTask {
    /// The four per-axis binary classifiers.
    Dims = 0,
    /// The 16-way type classifier.
    Type16 = 1,
}

impl TrainedTask {
    pub fn classifiers(self) -> Vec<ClassifierTask> {
        match self {
            TrainedTask::Dims => Axis::ALL.iter().map(|&a| ClassifierTask::Dim(a)).collect(),
            TrainedTask::Type16 => vec![ClassifierTask::Type16],
        }
    }
}

impl FromStr for TrainedTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dims" => Ok(TrainedTask::Dims),
            "type16" => Ok(TrainedTask::Type16),
            other => Err(Error::Config(format!("unknown task {other:?}, expected dims or type16"))),
        }
    }
}

impl fmt::Display for TrainedTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainedTask::Dims => "dims",
            TrainedTask::Type16 => "type16",
        })
    }
}

/// Seeded uniform init in `±1/sqrt(fan_in)` for every tensor.
pub fn init_head(config: &HeadConfig) -> Result<HeadParams> {
    config.validate()?;
    let mut params = HeadParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let fan_ins = params.fan_ins();
    for (tensor, fan_in) in params.tensors_mut().into_iter().zip(fan_ins) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        tensor.iter_mut().for_each(|v| *v = rng.gen_range(-bound..=bound));
    }
    Ok(params)
}

/// Gate activations of one GRU step, kept for the backward pass.
#[derive(Clone, Debug)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
}

fn gru_step_cached(layer: &GruLayer, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, StepCache) {
    let n = layer.hidden();
    let mut pre = layer.bias.clone();
    layer.w_input.matvec_acc(x, &mut pre);
    // z and r see U·h directly; the candidate sees U_h·(r ⊙ h)
    let mut rec_zr = vec![0.0; 2 * n];
    for (i, out) in rec_zr.iter_mut().enumerate() {
        *out = crate::linalg::dot(layer.w_recur.row(i), h_prev);
    }
    let z: Vec<f64> = (0..n).map(|i| sigmoid(pre[i] + rec_zr[i])).collect();
    let r: Vec<f64> = (0..n).map(|i| sigmoid(pre[n + i] + rec_zr[n + i])).collect();
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let cand: Vec<f64> = (0..n)
        .map(|i| (pre[2 * n + i] + crate::linalg::dot(layer.w_recur.row(2 * n + i), &rh)).tanh())
        .collect();
    let h: Vec<f64> = (0..n).map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * cand[i]).collect();
    (
        h,
        StepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            cand,
        },
    )
}

/// One GRU step:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `ĥ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ ĥ`.
pub fn gru_step(layer: &GruLayer, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.input() || h_prev.len() != layer.hidden() {
        return Err(Error::Shape(format!(
            "GRU layer {}→{} given x of {} and h of {}",
            layer.input(),
            layer.hidden(),
            x.len(),
            h_prev.len()
        )));
    }
    Ok(gru_step_cached(layer, x, h_prev).0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

#[derive(Clone, Debug)]
enum TraceBody {
    Gru {
        /// `[layer][t]`
        steps: Vec<Vec<StepCache>>,
        /// `[boundary][t]` multipliers applied to the lower layer's output
        /// before it enters the next layer (0 or 1/(1−p)).
        masks: Vec<Vec<Vec<f64>>>,
    },
    MeanPool {
        mean: Vec<f64>,
    },
}

/// Activations recorded by a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    body: TraceBody,
    pub h_final: Vec<f64>,
}

fn check_sequence(config: &HeadConfig, sequence: &[Embedding]) -> Result<()> {
    if sequence.is_empty() {
        return Err(Error::Empty("embedding sequence"));
    }
    if let Some(bad) = sequence.iter().find(|e| e.dim() != config.input_dim) {
        return Err(Error::DimensionMismatch {
            expected: config.input_dim,
            actual: bad.dim(),
        });
    }
    Ok(())
}

/// Maps an ordered embedding sequence to `h_final`.
///
/// The GRU trunk returns the top layer's state after the last step; in train
/// mode inverted dropout is applied to each layer's outputs before they feed
/// the next layer, and a trace is returned. The mean-pool trunk applies its
/// linear map to the average embedding.
pub fn head_forward(params: &HeadParams, sequence: &[Embedding], mode: Mode) -> Result<(Vec<f64>, Option<ForwardTrace>)> {
    check_sequence(&params.config, sequence)?;
    let train = matches!(mode, Mode::Train { .. });
    match &params.trunk {
        Trunk::MeanPool(lin) => {
            let n = sequence.len() as f64;
            let mut mean = vec![0.0; params.config.input_dim];
            for e in sequence {
                crate::linalg::axpy(1.0 / n, e.as_slice(), &mut mean);
            }
            let h_final = lin.forward(&mean);
            let trace = train.then(|| ForwardTrace {
                body: TraceBody::MeanPool { mean },
                h_final: h_final.clone(),
            });
            Ok((h_final, trace))
        }
        Trunk::Gru(layers) => {
            let mut rng = match mode {
                Mode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
                Mode::Eval => None,
            };
            let p = params.config.dropout_p;
            let keep_scale = 1.0 / (1.0 - p);
            let mut inputs: Vec<Vec<f64>> = sequence.iter().map(|e| e.as_slice().to_vec()).collect();
            let mut steps = Vec::with_capacity(layers.len());
            let mut masks = Vec::new();
            for (l, layer) in layers.iter().enumerate() {
                if l > 0 {
                    if let Some(rng) = rng.as_mut() {
                        let boundary: Vec<Vec<f64>> = inputs
                            .iter()
                            .map(|x| {
                                (0..x.len())
                                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
                                    .collect()
                            })
                            .collect();
                        for (x, m) in inputs.iter_mut().zip(&boundary) {
                            x.iter_mut().zip(m).for_each(|(v, s)| *v *= s);
                        }
                        masks.push(boundary);
                    }
                }
                let mut h = vec![0.0; layer.hidden()];
                let mut outputs = Vec::with_capacity(inputs.len());
                let mut layer_steps = Vec::with_capacity(if train { inputs.len() } else { 0 });
                for x in &inputs {
                    let (h_next, cache) = gru_step_cached(layer, x, &h);
                    if train {
                        layer_steps.push(cache);
                    }
                    outputs.push(h_next.clone());
                    h = h_next;
                }
                steps.push(layer_steps);
                inputs = outputs;
            }
            let h_final = inputs.pop().expect("non-empty sequence");
            let trace = train.then(|| ForwardTrace {
                body: TraceBody::Gru { steps, masks },
                h_final: h_final.clone(),
            });
            Ok((h_final, trace))
        }
    }
}

/// Logits of one classifier over `h_final`.
pub fn classifier_forward(params: &HeadParams, h_final: &[f64], task: ClassifierTask) -> Result<Vec<f64>> {
    if h_final.len() != params.config.hidden_dim {
        return Err(Error::DimensionMismatch {
            expected: params.config.hidden_dim,
            actual: h_final.len(),
        });
    }
    if h_final.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("h_final".into()));
    }
    Ok(params.classifier(task).forward(h_final))
}

/// Gradients of every parameter given `∂loss/∂logits` for each classifier in
/// `upstream`. Classifiers not listed receive zero gradient.
pub fn head_backward(params: &HeadParams, trace: &ForwardTrace, upstream: &[(ClassifierTask, Vec<f64>)]) -> Result<HeadParams> {
    let h = params.config.hidden_dim;
    if trace.h_final.len() != h {
        return Err(Error::Shape("trace does not match head parameters".into()));
    }
    let mut grads = params.zeros_like();
    let mut d_final = vec![0.0; h];
    for (task, d_logits) in upstream {
        if d_logits.len() != task.classes() {
            return Err(Error::Shape(format!(
                "{} logit gradients for a {}-way classifier",
                d_logits.len(),
                task.classes()
            )));
        }
        let g = grads.classifier_mut(*task);
        g.weight.add_outer(d_logits, &trace.h_final);
        g.bias.iter_mut().zip(d_logits).for_each(|(b, d)| *b += d);
        params.classifier(*task).weight.matvec_t_acc(d_logits, &mut d_final);
    }

    match (&params.trunk, &mut grads.trunk, &trace.body) {
        (Trunk::MeanPool(_), Trunk::MeanPool(g), TraceBody::MeanPool { mean }) => {
            g.weight.add_outer(&d_final, mean);
            g.bias.iter_mut().zip(&d_final).for_each(|(b, d)| *b += d);
        }
        (Trunk::Gru(layers), Trunk::Gru(glayers), TraceBody::Gru { steps, masks }) => {
            if steps.len() != layers.len() || steps.iter().any(|s| s.len() != steps[0].len()) {
                return Err(Error::Shape("trace does not match head parameters".into()));
            }
            let len = steps[0].len();
            // gradient w.r.t. each output of the current layer
            let mut d_out: Vec<Vec<f64>> = vec![vec![0.0; h]; len];
            d_out[len - 1] = d_final;
            for l in (0..layers.len()).rev() {
                let d_in = gru_layer_backward(&layers[l], &mut glayers[l], &steps[l], &d_out);
                if l > 0 {
                    let mask = masks.get(l - 1);
                    d_out = d_in
                        .into_iter()
                        .enumerate()
                        .map(|(t, mut d)| {
                            if let Some(m) = mask {
                                d.iter_mut().zip(&m[t]).for_each(|(v, s)| *v *= s);
                            }
                            d
                        })
                        .collect();
                }
            }
        }
        _ => return Err(Error::Shape("trace does not match head parameters".into())),
    }
    Ok(grads)
}

/// Back-propagation through time for one layer. Returns `∂loss/∂x_t`.
fn gru_layer_backward(layer: &GruLayer, grad: &mut GruLayer, steps: &[StepCache], d_out: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = layer.hidden();
    let mut d_inputs = vec![Vec::new(); steps.len()];
    let mut carry = vec![0.0; n];
    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        let dh: Vec<f64> = carry.iter().zip(&d_out[t]).map(|(a, b)| a + b).collect();
        let mut d_pre = vec![0.0; 3 * n];
        let mut d_prev: Vec<f64> = (0..n).map(|i| dh[i] * (1.0 - s.z[i])).collect();
        for i in 0..n {
            let dz = dh[i] * (s.cand[i] - s.h_prev[i]);
            let dc = dh[i] * s.z[i];
            d_pre[i] = dz * s.z[i] * (1.0 - s.z[i]);
            d_pre[2 * n + i] = dc * (1.0 - s.cand[i] * s.cand[i]);
        }
        // candidate path through U_h (r ⊙ h)
        let rh: Vec<f64> = s.r.iter().zip(&s.h_prev).map(|(a, b)| a * b).collect();
        let mut d_rh = vec![0.0; n];
        for i in 0..n {
            let da = d_pre[2 * n + i];
            if da != 0.0 {
                crate::linalg::axpy(da, layer.w_recur.row(2 * n + i), &mut d_rh);
                crate::linalg::axpy(da, &rh, grad.w_recur.row_mut(2 * n + i));
            }
        }
        for i in 0..n {
            d_prev[i] += d_rh[i] * s.r[i];
            let dr = d_rh[i] * s.h_prev[i];
            d_pre[n + i] = dr * s.r[i] * (1.0 - s.r[i]);
        }
        // z and r recurrent paths
        for row in 0..2 * n {
            let da = d_pre[row];
            if da != 0.0 {
                crate::linalg::axpy(da, layer.w_recur.row(row), &mut d_prev);
                crate::linalg::axpy(da, &s.h_prev, grad.w_recur.row_mut(row));
            }
        }
        grad.w_input.add_outer(&d_pre, &s.x);
        grad.bias.iter_mut().zip(&d_pre).for_each(|(b, d)| *b += d);
        let mut dx = vec![0.0; layer.input()];
        layer.w_input.matvec_t_acc(&d_pre, &mut dx);
        d_inputs[t] = dx;
        carry = d_prev;
    }
    d_inputs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{argmax, softmax};

    fn emb(v: Vec<f64>) -> Embedding {
        Embedding::new(v).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Vec<Embedding> {
        (0..len)
            .map(|_| emb((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect()
    }

    fn small_config(kind: HeadKind) -> HeadConfig {
        HeadConfig {
            kind,
            input_dim: 6,
            hidden_dim: 4,
            layers: 2,
            dropout_p: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = small_config(HeadKind::Gru);
        let a = init_head(&cfg).unwrap();
        assert_eq!(a, init_head(&cfg).unwrap());
        for (t, fan_in) in a.tensors().iter().zip(a.fan_ins()) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            assert!(t.iter().all(|v| v.is_finite() && v.abs() <= bound));
        }
    }

    #[test]
    fn default_sized_shapes() {
        let params = HeadParams::zeros(&HeadConfig::gru(4096));
        let Trunk::Gru(layers) = &params.trunk else { panic!() };
        assert_eq!(layers.len(), 3);
        assert_eq!((layers[0].w_input.rows(), layers[0].w_input.cols()), (3 * 512, 4096));
        assert_eq!((layers[1].w_input.rows(), layers[1].w_input.cols()), (3 * 512, 512));
        assert_eq!(params.type16.weight.rows(), 16);
    }

    #[test]
    fn zero_params_halve_state() {
        let layer = GruLayer::zeros(3, 2);
        let h = gru_step(&layer, &[1.0, -2.0, 0.5], &[0.8, -0.4]).unwrap();
        assert_eq!(h, vec![0.4, -0.2]);
        assert_eq!(gru_step(&layer, &[1.0, 1.0, 1.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(gru_step(&layer, &[1.0], &[0.0, 0.0]).is_err());
    }

    /// Gate formulas written out per unit with separate weight lookups.
    fn oracle_gru_step(layer: &GruLayer, x: &[f64], h: &[f64]) -> Vec<f64> {
        let n = h.len();
        let lin = |gate: usize, i: usize, hv: &[f64]| {
            let row = gate * n + i;
            let mut acc = layer.bias[row];
            for (j, xj) in x.iter().enumerate() {
                acc += layer.w_input[(row, j)] * xj;
            }
            for (j, hj) in hv.iter().enumerate() {
                acc += layer.w_recur[(row, j)] * hj;
            }
            acc
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let r: Vec<f64> = (0..n).map(|i| sig(lin(1, i, h))).collect();
        let rh: Vec<f64> = (0..n).map(|i| r[i] * h[i]).collect();
        (0..n)
            .map(|i| {
                let z = sig(lin(0, i, h));
                let c = lin(2, i, &rh).tanh();
                (1.0 - z) * h[i] + z * c
            })
            .collect()
    }

    #[test]
    fn gru_step_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for seed in 0..10 {
            let cfg = HeadConfig {
                hidden_dim: 3,
                input_dim: 5,
                layers: 1,
                seed,
                ..small_config(HeadKind::Gru)
            };
            let params = init_head(&cfg).unwrap();
            let Trunk::Gru(layers) = &params.trunk else { panic!() };
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let h: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = gru_step(&layers[0], &x, &h).unwrap();
            let want = oracle_gru_step(&layers[0], &x, &h);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn meanpool_identity_passes_input_through() {
        let cfg = HeadConfig {
            kind: HeadKind::MeanPool,
            input_dim: 3,
            hidden_dim: 3,
            layers: 1,
            dropout_p: 0.0,
            seed: 0,
        };
        let mut params = HeadParams::zeros(&cfg);
        params.trunk = Trunk::MeanPool(Linear {
            weight: Matrix::identity(3),
            bias: vec![0.0; 3],
        });
        let (h, trace) = head_forward(&params, &[emb(vec![1.0, -2.0, 3.5])], Mode::Eval).unwrap();
        assert_eq!(h, vec![1.0, -2.0, 3.5]);
        assert!(trace.is_none());
    }

    #[test]
    fn eval_is_deterministic_and_dropout_zero_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = random_seq(&mut rng, 3, 6);
        let cfg = HeadConfig {
            layers: 3,
            ..small_config(HeadKind::Gru)
        };
        let params = init_head(&cfg).unwrap();
        let (a, _) = head_forward(&params, &seq, Mode::Eval).unwrap();
        let (b, _) = head_forward(&params, &seq, Mode::Eval).unwrap();
        assert_eq!(a, b);
        let (c, trace) = head_forward(&params, &seq, Mode::Train { dropout_seed: 99 }).unwrap();
        assert_eq!(a, c);
        assert_eq!(trace.unwrap().h_final, a);
    }

    #[test]
    fn forward_errors() {
        let params = init_head(&small_config(HeadKind::Gru)).unwrap();
        assert!(matches!(head_forward(&params, &[], Mode::Eval), Err(Error::Empty(_))));
        assert!(matches!(
            head_forward(&params, &[emb(vec![1.0; 5])], Mode::Eval),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn classifier_examples() {
        let cfg = HeadConfig {
            hidden_dim: 3,
            ..small_config(HeadKind::MeanPool)
        };
        let mut params = HeadParams::zeros(&cfg);
        let h = [0.5, -1.0, 2.0];
        let l2 = classifier_forward(&params, &h, ClassifierTask::Dim(Axis::EI)).unwrap();
        assert_eq!(softmax(&l2), vec![0.5, 0.5]);
        let l16 = classifier_forward(&params, &h, ClassifierTask::Type16).unwrap();
        assert_eq!(l16.len(), 16);
        assert!(softmax(&l16).iter().all(|&p| (p - 1.0 / 16.0).abs() < 1e-15));

        // class 0: 1·0.5 + 0·(−1) + 1·2 = 2.5; class 1: 0·0.5 + 1·(−1) + 1·2 = 1.0
        params.dims[Axis::TF.index()] = Linear {
            weight: Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]).unwrap(),
            bias: vec![0.0, 0.0],
        };
        let l = classifier_forward(&params, &h, ClassifierTask::Dim(Axis::TF)).unwrap();
        assert_eq!(l, vec![2.5, 1.0]);
        assert_eq!(argmax(&l), 0);
        let shifted: Vec<f64> = l.iter().map(|v| v + 7.0).collect();
        assert_eq!(argmax(&shifted), 0);
        assert!("XY".parse::<ClassifierTask>().is_err());
        assert_eq!("s/n".parse::<ClassifierTask>().unwrap(), ClassifierTask::Dim(Axis::SN));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = random_seq(&mut rng, 3, 6);
        for kind in [HeadKind::Gru, HeadKind::MeanPool] {
            let params = init_head(&small_config(kind)).unwrap();
            let (_, trace) = head_forward(&params, &seq, Mode::Train { dropout_seed: 0 }).unwrap();
            let g = head_backward(
                &params,
                &trace.unwrap(),
                &[(ClassifierTask::Type16, vec![0.0; 16])],
            )
            .unwrap();
            assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = random_seq(&mut rng, 2, 6);
        let gru = init_head(&small_config(HeadKind::Gru)).unwrap();
        let pool = init_head(&small_config(HeadKind::MeanPool)).unwrap();
        let (_, trace) = head_forward(&pool, &seq, Mode::Train { dropout_seed: 0 }).unwrap();
        assert!(head_backward(&gru, &trace.unwrap(), &[]).is_err());
    }

    fn loss_of(params: &HeadParams, seq: &[Embedding], targets: &[(ClassifierTask, usize)]) -> f64 {
        let (h, _) = head_forward(params, seq, Mode::Eval).unwrap();
        targets
            .iter()
            .map(|&(task, y)| {
                let logits = classifier_forward(params, &h, task).unwrap();
                crate::linalg::log_sum_exp(&logits) - logits[y]
            })
            .sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [HeadKind::MeanPool, HeadKind::Gru] {
            check_gradients(kind);
        }
    }

    fn check_gradients(kind: HeadKind) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = random_seq(&mut rng, 3, 6);
        let params = init_head(&small_config(kind)).unwrap();
        let targets = [(ClassifierTask::Dim(Axis::EI), 1), (ClassifierTask::Type16, 9)];
        let (h, trace) = head_forward(&params, &seq, Mode::Train { dropout_seed: 0 }).unwrap();
        let upstream: Vec<_> = targets
            .iter()
            .map(|&(task, y)| {
                let mut p = softmax(&classifier_forward(&params, &h, task).unwrap());
                p[y] -= 1.0;
                (task, p)
            })
            .collect();
        let grads = head_backward(&params, &trace.unwrap(), &upstream).unwrap();
        let analytic: Vec<f64> = grads.tensors().concat();
        let mut probe = params.clone();
        let eps = 1e-5;
        let mut k = 0;
        for ti in 0..probe.tensors().len() {
            for j in 0..probe.tensors()[ti].len() {
                let orig = probe.tensors()[ti][j];
                probe.tensors_mut()[ti][j] = orig + eps;
                let up = loss_of(&probe, &seq, &targets);
                probe.tensors_mut()[ti][j] = orig - eps;
                let down = loss_of(&probe, &seq, &targets);
                probe.tensors_mut()[ti][j] = orig;
                let numeric = (up - down) / (2.0 * eps);
                assert!((numeric - analytic[k]).abs() <= 1e-6 * (1.0 + numeric.abs()));
                k += 1;
            }
        }
    }

    #[test]
    fn dropout_masks_scale_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq = random_seq(&mut rng, 4, 6);
        let cfg = HeadConfig {
            dropout_p: 0.5,
            ..small_config(HeadKind::Gru)
        };
        let params = init_head(&cfg).unwrap();
        let (_, trace) = head_forward(&params, &seq, Mode::Train { dropout_seed: 5 }).unwrap();
        let TraceBody::Gru { masks, .. } = trace.unwrap().body else { panic!() };
        assert_eq!(masks.len(), 1);
        for m in masks[0].iter().flatten() {
            assert!(*m == 0.0 || *m == 2.0);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.phed");
        for kind in [HeadKind::Gru, HeadKind::MeanPool] {
            let params = init_head(&small_config(kind)).unwrap();
            params.save(TrainedTask::Type16, &path).unwrap();
            let (back, task) = HeadParams::load(&path).unwrap();
            assert_eq!(back, params);
            assert_eq!(task, TrainedTask::Type16);
        }
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(HeadParams::load(&path), Err(Error::Checksum { .. })));
    }
}
