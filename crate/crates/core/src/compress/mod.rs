//! Compression operators: the adaptive EMA-threshold sparsifier, static
//! top-k and random-k baselines, binary16 coding of kept coordinates, the
//! error-feedback residual buffer, and the sparse wire format.
//!
//! The adaptive pipeline for one update `c` is: update the per-layer
//! threshold `tau <- beta*tau + (1-beta)*mean|c|`, keep indices with
//! `|c_i| >= tau` (keeping at least the single largest coordinate per layer
//! so the keep rate stays bounded away from zero), code kept values to
//! binary16, and fold what was lost back into the residual buffer for the
//! next round.

mod payload;

pub use payload::{
    decode_payload, dequantize, encode_payload, DequantizeError, LayerBlock, PayloadDecodeError,
    PayloadEntry, SparsePayload, BLOCK_HEADER_BYTES, ENTRY_BYTES, HEADER_BYTES,
};

use crate::halfcodec::{self, RoundingMode};
use crate::tensor::{layer_abs_mean_at, LayerLayout, ParamVector, SeededRng, TensorError};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("invalid smoothing constant {0}; expected [0, 1)")]
    InvalidBeta(f64),
    #[error("invalid keep fraction {0}; expected (0, 1]")]
    InvalidFraction(f64),
    #[error("support does not match layout: {0}")]
    InvalidSupport(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] crate::halfcodec::CodecError),
}

/// Whether thresholds are tracked per layer or as a single value over all
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdScope {
    PerLayer,
    Global,
}

/// How the residual buffer absorbs what compression lost.
///
/// `FullEf` keeps `r = c - u` on every coordinate, so dropped coordinates
/// accumulate and re-enter later rounds. `QuantErrorOnly` stores only the
/// coding error on transmitted coordinates and zeros elsewhere, discarding
/// dropped coordinates permanently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualPolicy {
    FullEf,
    QuantErrorOnly,
}

/// Value coding applied to kept coordinates. `Passthrough` keeps exact f32
/// values in the reconstruction (the payload still carries binary16 for
/// size bookkeeping); it exists for lossless-pipeline equivalence checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Binary16(RoundingMode),
    Passthrough,
}

/// Exponentially smoothed sparsification thresholds.
#[derive(Debug, Clone)]
pub struct EmaThresholdState {
    layout: Arc<LayerLayout>,
    beta: f64,
    scope: ThresholdScope,
    tau: Vec<f64>, // one per layer; kept equal across layers in Global scope
}

impl EmaThresholdState {
    /// Thresholds start at zero; the recurrence forgets the start
    /// geometrically.
    pub fn new(
        layout: &Arc<LayerLayout>,
        beta: f64,
        scope: ThresholdScope,
    ) -> Result<Self, CompressError> {
        if !(0.0..1.0).contains(&beta) {
            return Err(CompressError::InvalidBeta(beta));
        }
        Ok(EmaThresholdState {
            layout: Arc::clone(layout),
            beta,
            scope,
            tau: vec![0.0; layout.num_layers()],
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn scope(&self) -> ThresholdScope {
        self.scope
    }

    pub fn tau(&self, layer: &str) -> Option<f64> {
        self.layout.layer_index(layer).map(|i| self.tau[i])
    }

    pub fn tau_at(&self, layer: usize) -> f64 {
        self.tau[layer]
    }

    /// Force every threshold to a fixed value. Diagnostic hook used by the
    /// lossless-reduction checks.
    pub fn set_all(&mut self, value: f64) {
        for t in &mut self.tau {
            *t = value;
        }
    }
}

/// `tau_l <- beta * tau_l + (1 - beta) * mean|c_l|` for every layer (or the
/// single global mean when scoped globally). Returns the advanced state.
pub fn update_threshold(
    state: &EmaThresholdState,
    c: &ParamVector,
) -> Result<EmaThresholdState, CompressError> {
    c.check_finite()
        .map_err(tensor_nonfinite_to_compress)?;
    let mut next = state.clone();
    match state.scope {
        ThresholdScope::PerLayer => {
            for (i, t) in next.tau.iter_mut().enumerate() {
                let mean = layer_abs_mean_at(c, i);
                *t = state.beta * *t + (1.0 - state.beta) * mean;
            }
        }
        ThresholdScope::Global => {
            let mean = crate::tensor::abs_mean(c);
            let t = state.beta * state.tau[0] + (1.0 - state.beta) * mean;
            for slot in &mut next.tau {
                *slot = t;
            }
        }
    }
    Ok(next)
}

fn tensor_nonfinite_to_compress(e: TensorError) -> CompressError {
    match e {
        TensorError::NonFinite { index } => CompressError::NonFinite { index },
        other => CompressError::Tensor(other),
    }
}

/// Kept indices per layer, sorted ascending, layer-local.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Support {
    per_layer: Vec<Vec<u32>>,
}

impl Support {
    pub fn layer(&self, i: usize) -> &[u32] {
        &self.per_layer[i]
    }

    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn total_kept(&self) -> usize {
        self.per_layer.iter().map(|v| v.len()).sum()
    }

    fn validate(&self, layout: &LayerLayout) -> Result<(), CompressError> {
        if self.per_layer.len() != layout.num_layers() {
            return Err(CompressError::InvalidSupport(format!(
                "{} layers in support, layout has {}",
                self.per_layer.len(),
                layout.num_layers()
            )));
        }
        for (i, indices) in self.per_layer.iter().enumerate() {
            let len = layout.segment(i).len as u32;
            let mut prev: Option<u32> = None;
            for &idx in indices {
                if idx >= len {
                    return Err(CompressError::InvalidSupport(format!(
                        "index {idx} out of range for layer {i} of length {len}"
                    )));
                }
                if let Some(p) = prev {
                    if idx <= p {
                        return Err(CompressError::InvalidSupport(format!(
                            "indices not strictly increasing in layer {i}"
                        )));
                    }
                }
                prev = Some(idx);
            }
        }
        Ok(())
    }
}

/// Per-compression accounting: kept counts, the resulting keep fraction
/// (the contraction constant of the masked update), and clamp events.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressReport {
    kept_per_layer: Vec<usize>,
    pub keep_fraction: f64,
    pub clamp_count: u64,
}

impl CompressReport {
    /// Report for a strategy that transmits every coordinate.
    pub(crate) fn dense(layout: &LayerLayout, clamp_count: u64) -> Self {
        CompressReport {
            kept_per_layer: layout.layers().iter().map(|s| s.len).collect(),
            keep_fraction: 1.0,
            clamp_count,
        }
    }

    pub(crate) fn from_support(support: &Support, layout: &LayerLayout) -> Self {
        let kept_per_layer: Vec<usize> = support.per_layer.iter().map(|v| v.len()).collect();
        let total: usize = kept_per_layer.iter().sum();
        CompressReport {
            kept_per_layer,
            keep_fraction: total as f64 / layout.total_dim() as f64,
            clamp_count: 0,
        }
    }

    pub fn kept_at(&self, layer: usize) -> usize {
        self.kept_per_layer[layer]
    }

    pub fn kept_for(&self, layout: &LayerLayout, layer: &str) -> Option<usize> {
        layout.layer_index(layer).map(|i| self.kept_per_layer[i])
    }

    pub fn total_kept(&self) -> usize {
        self.kept_per_layer.iter().sum()
    }
}

/// Keep indices with `|c_i| >= tau` for their layer. A layer whose selection
/// comes up empty keeps its single largest-magnitude coordinate (lowest
/// index on ties) so the keep fraction never reaches zero.
pub fn sparsify_threshold(c: &ParamVector, state: &EmaThresholdState) -> (Support, CompressReport) {
    let layout = c.layout();
    let mut per_layer = Vec::with_capacity(layout.num_layers());
    for li in 0..layout.num_layers() {
        let slice = c.layer_slice(li);
        let tau = state.tau[li];
        let mut kept: Vec<u32> = Vec::new();
        for (i, &v) in slice.iter().enumerate() {
            // exact zeros carry no information and are never transmitted;
            // only the degenerate tau = 0 case is affected
            if v != 0.0 && (v as f64).abs() >= tau {
                kept.push(i as u32);
            }
        }
        if kept.is_empty() {
            let mut best = 0usize;
            let mut best_abs = slice[0].abs();
            for (i, &v) in slice.iter().enumerate().skip(1) {
                if v.abs() > best_abs {
                    best = i;
                    best_abs = v.abs();
                }
            }
            kept.push(best as u32);
        }
        per_layer.push(kept);
    }
    let support = Support { per_layer };
    let report = CompressReport::from_support(&support, layout);
    (support, report)
}

fn topk_count(fraction: f64, len: usize) -> usize {
    ((fraction * len as f64).ceil() as usize).clamp(1, len)
}

/// The `ceil(fraction * len)` largest-magnitude indices per layer; ties
/// break toward the lower index.
pub fn sparsify_topk(c: &ParamVector, fraction: f64) -> Result<Support, CompressError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CompressError::InvalidFraction(fraction));
    }
    let layout = c.layout();
    let mut per_layer = Vec::with_capacity(layout.num_layers());
    for li in 0..layout.num_layers() {
        let slice = c.layer_slice(li);
        let k = topk_count(fraction, slice.len());
        let mut order: Vec<u32> = (0..slice.len() as u32).collect();
        order.sort_unstable_by(|&a, &b| {
            let (va, vb) = (slice[a as usize].abs(), slice[b as usize].abs());
            vb.total_cmp(&va).then(a.cmp(&b))
        });
        let mut kept = order[..k].to_vec();
        kept.sort_unstable();
        per_layer.push(kept);
    }
    Ok(Support { per_layer })
}

/// `ceil(fraction * len)` uniformly random indices per layer, drawn without
/// replacement from the provided stream.
pub fn sparsify_random(
    c: &ParamVector,
    fraction: f64,
    rng: &mut SeededRng,
) -> Result<Support, CompressError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CompressError::InvalidFraction(fraction));
    }
    let layout = c.layout();
    let mut per_layer = Vec::with_capacity(layout.num_layers());
    for li in 0..layout.num_layers() {
        let len = layout.segment(li).len;
        let k = topk_count(fraction, len);
        let mut kept: Vec<u32> = rand::seq::index::sample(rng, len, k)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        kept.sort_unstable();
        per_layer.push(kept);
    }
    Ok(Support { per_layer })
}

/// Output of [`compress`]: the wire payload, the dense reconstruction the
/// aggregator consumes, and how many values clamped at the binary16 range.
#[derive(Debug)]
pub struct Compressed {
    pub payload: SparsePayload,
    pub reconstruction: ParamVector,
    pub clamp_count: u64,
}

/// Code the supported coordinates of `c` and rebuild the dense update the
/// receiver will see (decoded values on the support, zeros elsewhere).
pub fn compress(
    c: &ParamVector,
    support: &Support,
    codec: Codec,
    mut rng: Option<&mut SeededRng>,
    round: u32,
    client_id: u32,
) -> Result<Compressed, CompressError> {
    let layout = c.layout();
    support.validate(layout)?;
    c.check_finite().map_err(tensor_nonfinite_to_compress)?;

    let mut reconstruction = ParamVector::zeros(layout);
    let mut blocks = Vec::with_capacity(layout.num_layers());
    let mut clamp_count = 0u64;
    for li in 0..layout.num_layers() {
        let seg_offset = layout.segment(li).offset;
        let slice = c.layer_slice(li);
        let mut entries = Vec::with_capacity(support.layer(li).len());
        for &idx in support.layer(li) {
            let x = slice[idx as usize];
            let (value, recon) = match codec {
                Codec::Binary16(mode) => {
                    if halfcodec::would_clamp(x) {
                        clamp_count += 1;
                    }
                    let h = halfcodec::encode(x, mode, rng.as_deref_mut())?;
                    (h, h.to_f32())
                }
                Codec::Passthrough => {
                    let h = halfcodec::encode(x, RoundingMode::NearestEven, None)?;
                    (h, x)
                }
            };
            entries.push(PayloadEntry { index: idx, value });
            reconstruction.values_mut()[seg_offset + idx as usize] = recon;
        }
        blocks.push(LayerBlock {
            layer_id: li as u16,
            entries,
        });
    }
    Ok(Compressed {
        payload: SparsePayload {
            round,
            client_id,
            blocks,
        },
        reconstruction,
        clamp_count,
    })
}

/// Error-feedback residual buffer; starts at zero and stays finite.
#[derive(Debug, Clone)]
pub struct ResidualBuffer {
    r: ParamVector,
}

impl ResidualBuffer {
    pub fn zeros(layout: &Arc<LayerLayout>) -> Self {
        ResidualBuffer {
            r: ParamVector::zeros(layout),
        }
    }

    /// Resume from a carried residual; must be finite.
    pub fn from_vector(r: ParamVector) -> Result<Self, CompressError> {
        r.check_finite().map_err(tensor_nonfinite_to_compress)?;
        Ok(ResidualBuffer { r })
    }

    pub fn vector(&self) -> &ParamVector {
        &self.r
    }
}

/// Fold the compression error of this round into a fresh residual.
pub fn update_residual(
    c: &ParamVector,
    u_tilde: &ParamVector,
    support: &Support,
    policy: ResidualPolicy,
) -> Result<ResidualBuffer, CompressError> {
    if !c.same_layout(u_tilde) {
        return Err(CompressError::Tensor(TensorError::LayoutMismatch));
    }
    let layout = c.layout();
    support.validate(layout)?;
    let r = match policy {
        ResidualPolicy::FullEf => crate::tensor::axpy(-1.0, u_tilde, c)?,
        ResidualPolicy::QuantErrorOnly => {
            let mut r = ParamVector::zeros(layout);
            for li in 0..layout.num_layers() {
                let off = layout.segment(li).offset;
                for &idx in support.layer(li) {
                    let i = off + idx as usize;
                    r.values_mut()[i] = c.values()[i] - u_tilde.values()[i];
                }
            }
            r
        }
    };
    r.check_finite().map_err(tensor_nonfinite_to_compress)?;
    Ok(ResidualBuffer { r })
}
