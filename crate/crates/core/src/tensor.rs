//! Flat float32 parameter vectors with named layer segments, plus the seeded
//! random-number source shared by every stochastic component.
//!
//! `ParamVector` is the currency between the model, the compressor and the
//! server: a single contiguous `f32` buffer whose layout names contiguous
//! segments ("layers"). Norms and means accumulate in `f64` so that the
//! threshold dynamics are not dominated by summation drift.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("operands have mismatched layouts")]
    LayoutMismatch,
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("value length {got} does not match layout dimension {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

/// One named contiguous segment of the flat parameter space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSegment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered layer segments that tile `[0, total_dim)` exactly.
///
/// Built from `(name, len)` pairs so contiguity and coverage hold by
/// construction; lengths must be at least 1 and names unique.
#[derive(Debug, PartialEq, Eq)]
pub struct LayerLayout {
    layers: Vec<LayerSegment>,
    total_dim: usize,
}

impl LayerLayout {
    pub fn new<S: Into<String>>(segments: Vec<(S, usize)>) -> Result<Arc<Self>, TensorError> {
        if segments.is_empty() {
            return Err(TensorError::InvalidLayout("no layers".into()));
        }
        let mut layers = Vec::with_capacity(segments.len());
        let mut offset = 0usize;
        for (name, len) in segments {
            let name = name.into();
            if len == 0 {
                return Err(TensorError::InvalidLayout(format!(
                    "layer `{name}` has zero length"
                )));
            }
            if layers.iter().any(|s: &LayerSegment| s.name == name) {
                return Err(TensorError::InvalidLayout(format!(
                    "duplicate layer name `{name}`"
                )));
            }
            layers.push(LayerSegment { name, offset, len });
            offset += len;
        }
        Ok(Arc::new(LayerLayout {
            layers,
            total_dim: offset,
        }))
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn layers(&self) -> &[LayerSegment] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|s| s.name == name)
    }

    pub fn segment(&self, index: usize) -> &LayerSegment {
        &self.layers[index]
    }

    pub fn range(&self, index: usize) -> std::ops::Range<usize> {
        let s = &self.layers[index];
        s.offset..s.offset + s.len
    }

    /// Length of the longest layer; the keep-floor rule guarantees a keep
    /// fraction of at least `1 / max_layer_len`.
    pub fn max_layer_len(&self) -> usize {
        self.layers.iter().map(|s| s.len).max().unwrap_or(0)
    }
}

/// Flat float32 parameters tied to a layout.
///
/// Public operations keep every entry finite; boundary code (compression,
/// round orchestration) re-validates with [`ParamVector::check_finite`].
#[derive(Debug, Clone)]
pub struct ParamVector {
    layout: Arc<LayerLayout>,
    values: Vec<f32>,
}

impl ParamVector {
    pub fn zeros(layout: &Arc<LayerLayout>) -> Self {
        ParamVector {
            layout: Arc::clone(layout),
            values: vec![0.0; layout.total_dim()],
        }
    }

    pub fn from_values(layout: &Arc<LayerLayout>, values: Vec<f32>) -> Result<Self, TensorError> {
        if values.len() != layout.total_dim() {
            return Err(TensorError::LengthMismatch {
                expected: layout.total_dim(),
                got: values.len(),
            });
        }
        let v = ParamVector {
            layout: Arc::clone(layout),
            values,
        };
        v.check_finite()?;
        Ok(v)
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer_slice(&self, layer: usize) -> &[f32] {
        &self.values[self.layout.range(layer)]
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(index) => Err(TensorError::NonFinite { index }),
        }
    }
}

/// `a * x + y`, elementwise. Operands must share a layout.
pub fn axpy(a: f32, x: &ParamVector, y: &ParamVector) -> Result<ParamVector, TensorError> {
    if !x.same_layout(y) {
        return Err(TensorError::LayoutMismatch);
    }
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(&xi, &yi)| a * xi + yi)
        .collect();
    Ok(ParamVector {
        layout: Arc::clone(&x.layout),
        values,
    })
}

/// Mean absolute value over one layer's segment, accumulated in `f64`.
pub fn layer_abs_mean(x: &ParamVector, layer: &str) -> Result<f32, TensorError> {
    let idx = x
        .layout
        .layer_index(layer)
        .ok_or_else(|| TensorError::UnknownLayer(layer.to_string()))?;
    Ok(layer_abs_mean_at(x, idx) as f32)
}

/// Same as [`layer_abs_mean`] addressed by layer index, without the final
/// narrowing; the threshold recurrence runs on this `f64` value.
pub fn layer_abs_mean_at(x: &ParamVector, layer: usize) -> f64 {
    let slice = x.layer_slice(layer);
    let sum: f64 = slice.iter().map(|&v| (v as f64).abs()).sum();
    sum / slice.len() as f64
}

/// Mean absolute value over the whole vector, accumulated in `f64`.
pub fn abs_mean(x: &ParamVector) -> f64 {
    if x.values.is_empty() {
        return 0.0;
    }
    let sum: f64 = x.values.iter().map(|&v| (v as f64).abs()).sum();
    sum / x.values.len() as f64
}

/// Squared Euclidean norm accumulated in `f64`.
pub fn l2_norm_sq(x: &ParamVector) -> f64 {
    x.values.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

/// Deterministic ChaCha-based RNG addressed by `(seed, stream)`.
///
/// The same `(seed, stream)` pair yields the same byte sequence on every
/// platform, so each client owns disjoint streams and results do not depend
/// on scheduling.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}
