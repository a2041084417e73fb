//! Bit-exact wire format for sparse quantized updates.
//!
//! Little-endian throughout. Header: magic `"FSPQ"` (4 bytes), version `u8 =
//! 1`, `client_id u32`, `round u32`, `layer_count u16`. Per layer: `layer_id
//! u16`, `kept u32`, then `kept` entries of `index u32 | value u16`. The
//! 6-byte-per-coordinate body (index + binary16 value) is the reported
//! upload cost; framing is accounted separately as wire bytes.

use crate::halfcodec::Half;
use crate::tensor::{LayerLayout, ParamVector};
use std::sync::Arc;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FSPQ";
pub const VERSION: u8 = 1;

/// Fixed framing cost: file header plus one per-layer block header.
pub const HEADER_BYTES: u64 = 15;
pub const BLOCK_HEADER_BYTES: u64 = 6;
pub const ENTRY_BYTES: u64 = 6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PayloadDecodeError {
    #[error("truncated payload at offset {offset}: need {needed} more bytes, have {have}")]
    Truncated {
        offset: usize,
        needed: usize,
        have: usize,
    },
    #[error("bad magic at offset 0: expected \"FSPQ\", got {got:?}")]
    BadMagic { got: [u8; 4] },
    #[error("unsupported version {got} at offset 4")]
    BadVersion { got: u8 },
    #[error("indices not strictly increasing at offset {offset}")]
    IndexOrder { offset: usize },
    #[error("non-finite binary16 bits {bits:#06x} at offset {offset}")]
    NonFiniteValue { offset: usize, bits: u16 },
    #[error("{remaining} trailing bytes after payload at offset {offset}")]
    TrailingBytes { offset: usize, remaining: usize },
}

#[derive(Debug, Error)]
pub enum DequantizeError {
    #[error("layer id {layer_id} out of range for layout with {layers} layers")]
    UnknownLayer { layer_id: u16, layers: usize },
    #[error("layer ids not strictly increasing at block {block}")]
    LayerOrder { block: usize },
    #[error("index {index} out of range for layer {layer_id} of length {len}")]
    IndexOutOfRange { layer_id: u16, index: u32, len: usize },
    #[error("indices not strictly increasing in layer {layer_id}")]
    IndexOrder { layer_id: u16 },
}

/// One kept coordinate: layer-local index plus its binary16 value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadEntry {
    pub index: u32,
    pub value: Half,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerBlock {
    pub layer_id: u16,
    pub entries: Vec<PayloadEntry>,
}

/// The on-wire compressed update of one client for one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsePayload {
    pub round: u32,
    pub client_id: u32,
    pub blocks: Vec<LayerBlock>,
}

impl SparsePayload {
    pub fn total_kept(&self) -> usize {
        self.blocks.iter().map(|b| b.entries.len()).sum()
    }

    /// The 6-bytes-per-kept-coordinate cost model (no framing).
    pub fn body_bytes(&self) -> u64 {
        ENTRY_BYTES * self.total_kept() as u64
    }

    /// Full serialized length, framing included.
    pub fn wire_bytes(&self) -> u64 {
        HEADER_BYTES
            + self
                .blocks
                .iter()
                .map(|b| BLOCK_HEADER_BYTES + ENTRY_BYTES * b.entries.len() as u64)
                .sum::<u64>()
    }
}

pub fn encode_payload(p: &SparsePayload) -> Vec<u8> {
    let mut out = Vec::with_capacity(p.wire_bytes() as usize);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&p.client_id.to_le_bytes());
    out.extend_from_slice(&p.round.to_le_bytes());
    out.extend_from_slice(&(p.blocks.len() as u16).to_le_bytes());
    for block in &p.blocks {
        out.extend_from_slice(&block.layer_id.to_le_bytes());
        out.extend_from_slice(&(block.entries.len() as u32).to_le_bytes());
        for e in &block.entries {
            out.extend_from_slice(&e.index.to_le_bytes());
            out.extend_from_slice(&e.value.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], PayloadDecodeError> {
        let have = self.bytes.len() - self.pos;
        if have < N {
            return Err(PayloadDecodeError::Truncated {
                offset: self.pos,
                needed: N,
                have,
            });
        }
        let mut buf = [0u8; N];
        buf.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8, PayloadDecodeError> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, PayloadDecodeError> {
        Ok(u16::from_le_bytes(self.take::<2>()?))
    }

    fn u32(&mut self) -> Result<u32, PayloadDecodeError> {
        Ok(u32::from_le_bytes(self.take::<4>()?))
    }
}

pub fn decode_payload(bytes: &[u8]) -> Result<SparsePayload, PayloadDecodeError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take::<4>()?;
    if magic != MAGIC {
        return Err(PayloadDecodeError::BadMagic { got: magic });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(PayloadDecodeError::BadVersion { got: version });
    }
    let client_id = r.u32()?;
    let round = r.u32()?;
    let layer_count = r.u16()?;

    let mut blocks = Vec::with_capacity(layer_count as usize);
    for _ in 0..layer_count {
        let layer_id = r.u16()?;
        let kept = r.u32()?;
        let mut entries = Vec::with_capacity(kept as usize);
        let mut prev: Option<u32> = None;
        for _ in 0..kept {
            let index_offset = r.pos;
            let index = r.u32()?;
            if let Some(p) = prev {
                if index <= p {
                    return Err(PayloadDecodeError::IndexOrder {
                        offset: index_offset,
                    });
                }
            }
            prev = Some(index);
            let value_offset = r.pos;
            let bits = r.u16()?;
            let value = Half::from_bits(bits);
            if !value.is_finite() {
                return Err(PayloadDecodeError::NonFiniteValue {
                    offset: value_offset,
                    bits,
                });
            }
            entries.push(PayloadEntry { index, value });
        }
        blocks.push(LayerBlock { layer_id, entries });
    }
    if r.pos != bytes.len() {
        return Err(PayloadDecodeError::TrailingBytes {
            offset: r.pos,
            remaining: bytes.len() - r.pos,
        });
    }
    Ok(SparsePayload {
        round,
        client_id,
        blocks,
    })
}

/// Reconstruct the dense float32 update: decoded values at kept indices,
/// zeros everywhere else.
pub fn dequantize(
    p: &SparsePayload,
    layout: &Arc<LayerLayout>,
) -> Result<ParamVector, DequantizeError> {
    let mut dense = ParamVector::zeros(layout);
    let mut prev_layer: Option<u16> = None;
    for (bi, block) in p.blocks.iter().enumerate() {
        if let Some(p) = prev_layer {
            if block.layer_id <= p {
                return Err(DequantizeError::LayerOrder { block: bi });
            }
        }
        prev_layer = Some(block.layer_id);
        if block.layer_id as usize >= layout.num_layers() {
            return Err(DequantizeError::UnknownLayer {
                layer_id: block.layer_id,
                layers: layout.num_layers(),
            });
        }
        let seg = layout.segment(block.layer_id as usize);
        let values = dense.values_mut();
        let mut prev: Option<u32> = None;
        for e in &block.entries {
            if let Some(p) = prev {
                if e.index <= p {
                    return Err(DequantizeError::IndexOrder {
                        layer_id: block.layer_id,
                    });
                }
            }
            prev = Some(e.index);
            if e.index as usize >= seg.len {
                return Err(DequantizeError::IndexOutOfRange {
                    layer_id: block.layer_id,
                    index: e.index,
                    len: seg.len,
                });
            }
            values[seg.offset + e.index as usize] = e.value.to_f32();
        }
    }
    Ok(dense)
}
