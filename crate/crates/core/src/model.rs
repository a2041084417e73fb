//! Differentiable models over flat parameter vectors: multinomial logistic
//! regression and a one-hidden-layer ReLU MLP with softmax cross-entropy,
//! exact analytic gradients, and seeded mini-batch SGD with an optional
//! proximal pull toward the broadcast anchor.
//!
//! Weights precede biases per layer, row-major (one row per output unit),
//! so the layout of a `ParamVector` is a deterministic function of the
//! model description.

use crate::data::Dataset;
use crate::tensor::{LayerLayout, ParamVector, SeededRng, TensorError};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("training shard is empty")]
    EmptyShard,
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLu,
}

/// Model description; the parameter layout derives from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn linear(input_dim: usize, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Linear,
            input_dim,
            hidden_dim: 0,
            classes,
            activation: Activation::ReLu,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            classes,
            activation: Activation::ReLu,
        }
    }

    pub fn layout(&self) -> Result<Arc<LayerLayout>, ModelError> {
        if self.input_dim == 0 || self.classes == 0 {
            return Err(ModelError::DimensionMismatch(
                "input_dim and classes must be at least 1".into(),
            ));
        }
        let layout = match self.kind {
            ModelKind::Linear => LayerLayout::new(vec![
                ("w0".to_string(), self.classes * self.input_dim),
                ("b0".to_string(), self.classes),
            ]),
            ModelKind::Mlp => {
                if self.hidden_dim == 0 {
                    return Err(ModelError::DimensionMismatch(
                        "hidden_dim must be at least 1".into(),
                    ));
                }
                LayerLayout::new(vec![
                    ("w0".to_string(), self.hidden_dim * self.input_dim),
                    ("b0".to_string(), self.hidden_dim),
                    ("w1".to_string(), self.classes * self.hidden_dim),
                    ("b1".to_string(), self.classes),
                ])
            }
        };
        layout.map_err(ModelError::Tensor)
    }

    /// Glorot-uniform weights (`±sqrt(6 / (fan_in + fan_out))`), zero
    /// biases, drawn in layout order from the given stream.
    pub fn init_params(&self, rng: &mut SeededRng) -> Result<ParamVector, ModelError> {
        let layout = self.layout()?;
        let mut w = ParamVector::zeros(&layout);
        let fill = |range: std::ops::Range<usize>, limit: f32, rng: &mut SeededRng, w: &mut ParamVector| {
            for v in &mut w.values_mut()[range] {
                *v = rng.random_range(-limit..=limit);
            }
        };
        match self.kind {
            ModelKind::Linear => {
                let limit = (6.0 / (self.input_dim + self.classes) as f32).sqrt();
                fill(layout.range(0), limit, rng, &mut w);
            }
            ModelKind::Mlp => {
                let l0 = (6.0 / (self.input_dim + self.hidden_dim) as f32).sqrt();
                fill(layout.range(0), l0, rng, &mut w);
                let l1 = (6.0 / (self.hidden_dim + self.classes) as f32).sqrt();
                fill(layout.range(2), l1, rng, &mut w);
            }
        }
        Ok(w)
    }
}

/// A mini-batch: row-major inputs and class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f32>,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn new(inputs: Array2<f32>, labels: Vec<u32>) -> Result<Self, ModelError> {
        if inputs.nrows() != labels.len() {
            return Err(ModelError::DimensionMismatch(format!(
                "{} input rows vs {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::DimensionMismatch(
                "batch inputs must be finite".into(),
            ));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn from_dataset(ds: &Dataset, indices: &[u32]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * ds.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(ds.input_row(i as usize));
            labels.push(ds.labels[i as usize]);
        }
        Batch {
            inputs: Array2::from_shape_vec((indices.len(), ds.dim), data)
                .expect("row-major batch assembly"),
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Proximal pull `mu_prox * (w - anchor)` added to local gradients.
#[derive(Debug, Clone)]
pub struct ProxConfig {
    pub mu_prox: f64,
    pub anchor: ParamVector,
}

struct MlpViews<'a> {
    w0: ArrayView2<'a, f32>,
    b0: ArrayView1<'a, f32>,
    w1: Option<ArrayView2<'a, f32>>,
    b1: Option<ArrayView1<'a, f32>>,
}

fn views<'a>(w: &'a ParamVector, spec: &ModelSpec) -> MlpViews<'a> {
    match spec.kind {
        ModelKind::Linear => MlpViews {
            w0: ArrayView2::from_shape((spec.classes, spec.input_dim), w.layer_slice(0))
                .expect("layout shape"),
            b0: ArrayView1::from(w.layer_slice(1)),
            w1: None,
            b1: None,
        },
        ModelKind::Mlp => MlpViews {
            w0: ArrayView2::from_shape((spec.hidden_dim, spec.input_dim), w.layer_slice(0))
                .expect("layout shape"),
            b0: ArrayView1::from(w.layer_slice(1)),
            w1: Some(
                ArrayView2::from_shape((spec.classes, spec.hidden_dim), w.layer_slice(2))
                    .expect("layout shape"),
            ),
            b1: Some(ArrayView1::from(w.layer_slice(3))),
        },
    }
}

fn validate(w: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<(), ModelError> {
    let layout = spec.layout()?;
    if **w.layout() != *layout {
        return Err(ModelError::DimensionMismatch(
            "parameter layout does not match model".into(),
        ));
    }
    if batch.inputs.ncols() != spec.input_dim {
        return Err(ModelError::DimensionMismatch(format!(
            "batch dim {} vs input dim {}",
            batch.inputs.ncols(),
            spec.input_dim
        )));
    }
    for &l in &batch.labels {
        if l as usize >= spec.classes {
            return Err(ModelError::LabelOutOfRange {
                label: l,
                classes: spec.classes,
            });
        }
    }
    Ok(())
}

/// Logits plus the hidden pre-activation/activation pair for the MLP.
struct Forward {
    logits: Array2<f32>,
    z1: Option<Array2<f32>>,
    a1: Option<Array2<f32>>,
}

fn forward(w: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Forward {
    let v = views(w, spec);
    match spec.kind {
        ModelKind::Linear => Forward {
            logits: batch.inputs.dot(&v.w0.t()) + v.b0,
            z1: None,
            a1: None,
        },
        ModelKind::Mlp => {
            let z1 = batch.inputs.dot(&v.w0.t()) + v.b0;
            let a1 = z1.mapv(|x| x.max(0.0));
            let logits = a1.dot(&v.w1.expect("mlp").t()) + v.b1.expect("mlp");
            Forward {
                logits,
                z1: Some(z1),
                a1: Some(a1),
            }
        }
    }
}

/// Mean softmax cross-entropy (accumulated in f64) and argmax hit count.
pub fn forward_loss(
    w: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<(f64, usize), ModelError> {
    validate(w, spec, batch)?;
    let out = forward(w, spec, batch);
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for (row, &label) in out.logits.outer_iter().zip(&batch.labels) {
        let mut max = f32::NEG_INFINITY;
        let mut arg = 0usize;
        for (j, &z) in row.iter().enumerate() {
            if z > max {
                max = z;
                arg = j;
            }
        }
        if arg == label as usize {
            correct += 1;
        }
        let mut sum_exp = 0.0f64;
        for &z in row.iter() {
            sum_exp += ((z - max) as f64).exp();
        }
        loss += max as f64 + sum_exp.ln() - row[label as usize] as f64;
    }
    Ok((loss / batch.len().max(1) as f64, correct))
}

/// Exact analytic gradient of the mean loss, with the proximal term added
/// when configured.
pub fn gradient(
    w: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
    prox: Option<&ProxConfig>,
) -> Result<ParamVector, ModelError> {
    validate(w, spec, batch)?;
    let n = batch.len();
    let out = forward(w, spec, batch);

    // softmax minus one-hot, divided by the batch size
    let mut g2 = out.logits;
    for (mut row, &label) in g2.outer_iter_mut().zip(&batch.labels) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        for z in row.iter_mut() {
            *z /= sum;
        }
        row[label as usize] -= 1.0;
        for z in row.iter_mut() {
            *z /= n as f32;
        }
    }

    let layout = w.layout();
    let mut g = ParamVector::zeros(layout);
    match spec.kind {
        ModelKind::Linear => {
            let gw0 = g2.t().dot(&batch.inputs);
            let gb0 = g2.sum_axis(Axis(0));
            write_grad(&mut g, layout.range(0), &gw0);
            write_grad1(&mut g, layout.range(1), &gb0);
        }
        ModelKind::Mlp => {
            let v = views(w, spec);
            let a1 = out.a1.expect("mlp");
            let z1 = out.z1.expect("mlp");
            let gw1 = g2.t().dot(&a1);
            let gb1 = g2.sum_axis(Axis(0));
            let mut g1 = g2.dot(&v.w1.expect("mlp"));
            g1.zip_mut_with(&z1, |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            let gw0 = g1.t().dot(&batch.inputs);
            let gb0 = g1.sum_axis(Axis(0));
            write_grad(&mut g, layout.range(0), &gw0);
            write_grad1(&mut g, layout.range(1), &gb0);
            write_grad(&mut g, layout.range(2), &gw1);
            write_grad1(&mut g, layout.range(3), &gb1);
        }
    }

    if let Some(p) = prox {
        if !w.same_layout(&p.anchor) {
            return Err(ModelError::DimensionMismatch(
                "prox anchor layout does not match parameters".into(),
            ));
        }
        let mu = p.mu_prox as f32;
        let gv = g.values_mut();
        for ((gi, &wi), &ai) in gv.iter_mut().zip(w.values()).zip(p.anchor.values()) {
            *gi += mu * (wi - ai);
        }
    }
    Ok(g)
}

fn write_grad(g: &mut ParamVector, range: std::ops::Range<usize>, m: &Array2<f32>) {
    let m = m.as_standard_layout();
    g.values_mut()[range].copy_from_slice(m.as_slice().expect("standard layout"));
}

fn write_grad1(g: &mut ParamVector, range: std::ops::Range<usize>, v: &Array1<f32>) {
    g.values_mut()[range].copy_from_slice(v.as_slice().expect("contiguous"));
}

/// Mini-batch SGD over the shard with seeded per-epoch shuffling;
/// deterministic given the data, configuration and stream.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    w0: &ParamVector,
    spec: &ModelSpec,
    data: &Dataset,
    shard: &[u32],
    epochs: u32,
    batch_size: usize,
    lr: f64,
    prox: Option<&ProxConfig>,
    rng: &mut SeededRng,
) -> Result<ParamVector, ModelError> {
    if shard.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    if batch_size == 0 {
        return Err(ModelError::InvalidBatchSize);
    }
    let mut w = w0.clone();
    let lr = lr as f32;
    let mut order = shard.to_vec();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch = Batch::from_dataset(data, chunk);
            let g = gradient(&w, spec, &batch, prox)?;
            for (wi, &gi) in w.values_mut().iter_mut().zip(g.values()) {
                *wi -= lr * gi;
            }
        }
    }
    Ok(w)
}
