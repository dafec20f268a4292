//! Strided KV-cache tensor layouts and block-to-byte-span translation.
//!
//! A [`TensorLayout`] describes where a paged KV-cache tensor lives inside a
//! registered memory region: per-dimension labels, extents, and strides (in
//! elements). Remote peers exchange layouts once at connection time and from
//! then on translate block IDs into byte spans locally, with no round trip.
//!
//! Offsets returned by [`TensorLayout::element_offset`] are relative to the
//! tensor base; [`ByteSpan`]s returned by [`TensorLayout::block_to_spans`]
//! are absolute region offsets (base included) and are the unit a one-sided
//! read covers.

use thiserror::Error;

/// Label of the block-index dimension. Must appear exactly once.
pub const BLOCK_DIM: &str = "B";
/// Label of the K/V-selector dimension. Must appear exactly once.
pub const KV_DIM: &str = "KV";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("layout needs at least 2 dimensions, got {0}")]
    TooFewDims(usize),
    #[error("dims/shape/stride lengths differ: {dims}/{shape}/{stride}")]
    ArityMismatch {
        dims: usize,
        shape: usize,
        stride: usize,
    },
    #[error("dimension {0:?} has zero extent")]
    ZeroExtent(String),
    #[error("dimension {0:?} has zero stride")]
    ZeroStride(String),
    #[error("element size must be > 0")]
    ZeroElementSize,
    #[error("dimension label {0:?} must appear exactly once")]
    MissingOrDuplicateDim(&'static str),
    #[error("dimension label longer than 255 bytes")]
    LabelTooLong,
    #[error("strides alias: {outer:?} (stride {outer_stride}) overlaps {inner:?} span {inner_span}")]
    Aliasing {
        outer: String,
        outer_stride: u64,
        inner: String,
        inner_span: u64,
    },
    #[error("index arity {got} does not match {expected} dimensions")]
    IndexArity { expected: usize, got: usize },
    #[error("index {index} out of bounds for dimension {dim:?} of extent {extent}")]
    IndexOutOfBounds {
        dim: String,
        index: u64,
        extent: u64,
    },
    #[error("block id {block} out of range (0..{blocks})")]
    BlockOutOfRange { block: u64, blocks: u64 },
    #[error("trailing dimensions are not self-contiguous at {dim:?}: stride {stride}, expected {expected}")]
    NonContiguousTrailing {
        dim: String,
        stride: u64,
        expected: u64,
    },
    #[error("innermost trailing dimension {dim:?} has stride {stride}, expected 1")]
    InnerStrideNotOne { dim: String, stride: u64 },
    #[error("{dim:?} dimension stride {stride} falls inside the per-block span {span}")]
    BlockDimInsideSpan {
        dim: &'static str,
        stride: u64,
        span: u64,
    },
    #[error("offset arithmetic overflow")]
    Overflow,
    #[error("layout frame truncated: needed {needed} bytes, had {had}")]
    Truncated { needed: usize, had: usize },
    #[error("layout frame has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("layout frame label is not valid UTF-8")]
    BadLabel,
}

/// A contiguous byte range inside a memory region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ByteSpan {
    pub offset: u64,
    pub len: u64,
}

impl ByteSpan {
    pub fn new(offset: u64, len: u64) -> Self {
        debug_assert!(len > 0, "byte spans are non-empty");
        ByteSpan { offset, len }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.len
    }
}

/// Wire-exchanged descriptor of a paged KV-cache tensor.
///
/// Strides are stored in elements (not bytes) and scaled by `element_size`
/// only when byte offsets are produced, so the descriptor can never be
/// double-scaled. `base_address` is an offset into the owning memory region,
/// not a raw pointer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorLayout {
    base_address: u64,
    dims: Vec<String>,
    shape: Vec<u64>,
    stride: Vec<u64>,
    element_size: u32,
}

impl TensorLayout {
    pub fn new(
        base_address: u64,
        dims: Vec<String>,
        shape: Vec<u64>,
        stride: Vec<u64>,
        element_size: u32,
    ) -> Result<Self, LayoutError> {
        if dims.len() != shape.len() || dims.len() != stride.len() {
            return Err(LayoutError::ArityMismatch {
                dims: dims.len(),
                shape: shape.len(),
                stride: stride.len(),
            });
        }
        if dims.len() < 2 {
            return Err(LayoutError::TooFewDims(dims.len()));
        }
        if element_size == 0 {
            return Err(LayoutError::ZeroElementSize);
        }
        for (d, (&s, &st)) in dims.iter().zip(shape.iter().zip(stride.iter())) {
            if d.len() > 255 {
                return Err(LayoutError::LabelTooLong);
            }
            if s == 0 {
                return Err(LayoutError::ZeroExtent(d.clone()));
            }
            if st == 0 {
                return Err(LayoutError::ZeroStride(d.clone()));
            }
        }
        for label in [BLOCK_DIM, KV_DIM] {
            if dims.iter().filter(|d| d.as_str() == label).count() != 1 {
                return Err(LayoutError::MissingOrDuplicateDim(label));
            }
        }

        let layout = TensorLayout {
            base_address,
            dims,
            shape,
            stride,
            element_size,
        };
        layout.check_no_aliasing()?;
        Ok(layout)
    }

    /// The `[B, KV, L, H, D]` layout with K tensors of all blocks packed
    /// contiguously, then all V tensors (KV is the outermost stride).
    pub fn canonical(
        base_address: u64,
        blocks: u64,
        tokens_per_block: u64,
        heads: u64,
        head_dim: u64,
        element_size: u32,
    ) -> Result<Self, LayoutError> {
        let sub = tokens_per_block
            .checked_mul(heads)
            .and_then(|v| v.checked_mul(head_dim))
            .ok_or(LayoutError::Overflow)?;
        let kv_stride = sub.checked_mul(blocks).ok_or(LayoutError::Overflow)?;
        TensorLayout::new(
            base_address,
            vec![
                BLOCK_DIM.to_string(),
                KV_DIM.to_string(),
                "L".to_string(),
                "H".to_string(),
                "D".to_string(),
            ],
            vec![blocks, 2, tokens_per_block, heads, head_dim],
            vec![sub, kv_stride, heads * head_dim, head_dim, 1],
            element_size,
        )
    }

    pub fn base_address(&self) -> u64 {
        self.base_address
    }

    pub fn dims(&self) -> &[String] {
        &self.dims
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn stride(&self) -> &[u64] {
        &self.stride
    }

    pub fn element_size(&self) -> u32 {
        self.element_size
    }

    pub fn ndims(&self) -> usize {
        self.dims.len()
    }

    fn dim_index(&self, label: &str) -> usize {
        // constructor guarantees presence of B and KV
        self.dims.iter().position(|d| d == label).unwrap()
    }

    /// Number of blocks (extent of the `B` dimension).
    pub fn block_count(&self) -> u64 {
        self.shape[self.dim_index(BLOCK_DIM)]
    }

    /// Extent of the `KV` dimension (normally 2: one K and one V sub-tensor).
    pub fn kv_count(&self) -> u64 {
        self.shape[self.dim_index(KV_DIM)]
    }

    /// Total element count.
    pub fn element_count(&self) -> u64 {
        self.shape.iter().product()
    }

    /// Bytes from the region start needed to hold the whole tensor
    /// (base address plus the extent of the strided footprint).
    pub fn region_bytes(&self) -> Result<u64, LayoutError> {
        let mut max_elem: u64 = 0;
        for (&s, &st) in self.shape.iter().zip(self.stride.iter()) {
            max_elem = max_elem
                .checked_add((s - 1).checked_mul(st).ok_or(LayoutError::Overflow)?)
                .ok_or(LayoutError::Overflow)?;
        }
        (max_elem + 1)
            .checked_mul(self.element_size as u64)
            .and_then(|b| b.checked_add(self.base_address))
            .ok_or(LayoutError::Overflow)
    }

    /// Sufficient no-aliasing check: sorted by stride, every dimension must
    /// start at or past the strided footprint of the dimensions inside it.
    /// Extent-1 dimensions cannot alias and are skipped.
    fn check_no_aliasing(&self) -> Result<(), LayoutError> {
        let mut order: Vec<usize> = (0..self.ndims()).filter(|&d| self.shape[d] > 1).collect();
        order.sort_by_key(|&d| self.stride[d]);
        for pair in order.windows(2) {
            let (inner, outer) = (pair[0], pair[1]);
            let inner_span = self.shape[inner]
                .checked_mul(self.stride[inner])
                .ok_or(LayoutError::Overflow)?;
            if self.stride[outer] < inner_span {
                return Err(LayoutError::Aliasing {
                    outer: self.dims[outer].clone(),
                    outer_stride: self.stride[outer],
                    inner: self.dims[inner].clone(),
                    inner_span,
                });
            }
        }
        Ok(())
    }

    /// Base-relative byte offset of one element: `(index · stride) × element_size`.
    pub fn element_offset(&self, index: &[u64]) -> Result<u64, LayoutError> {
        if index.len() != self.ndims() {
            return Err(LayoutError::IndexArity {
                expected: self.ndims(),
                got: index.len(),
            });
        }
        let mut elems: u64 = 0;
        for (d, &idx) in index.iter().enumerate() {
            if idx >= self.shape[d] {
                return Err(LayoutError::IndexOutOfBounds {
                    dim: self.dims[d].clone(),
                    index: idx,
                    extent: self.shape[d],
                });
            }
            elems = elems
                .checked_add(idx.checked_mul(self.stride[d]).ok_or(LayoutError::Overflow)?)
                .ok_or(LayoutError::Overflow)?;
        }
        elems
            .checked_mul(self.element_size as u64)
            .ok_or(LayoutError::Overflow)
    }

    /// Trailing (non-B, non-KV) dimension indices.
    fn trailing_dims(&self) -> Vec<usize> {
        (0..self.ndims())
            .filter(|&d| self.dims[d] != BLOCK_DIM && self.dims[d] != KV_DIM)
            .collect()
    }

    /// Byte length of the contiguous memory covering one (block, KV)
    /// sub-tensor: the trailing dimension with the largest stride, times its
    /// extent, times the element size.
    ///
    /// Refuses layouts whose trailing dimensions do not chain into one dense
    /// span; coalescing on top of a silently decomposed block would
    /// misreport wire operations.
    pub fn block_span_bytes(&self) -> Result<u64, LayoutError> {
        let mut trailing: Vec<usize> = self
            .trailing_dims()
            .into_iter()
            .filter(|&d| self.shape[d] > 1)
            .collect();
        trailing.sort_by_key(|&d| self.stride[d]);

        if trailing.is_empty() {
            // single-element sub-tensor
            return Ok(self.element_size as u64);
        }

        let innermost = trailing[0];
        if self.stride[innermost] != 1 {
            return Err(LayoutError::InnerStrideNotOne {
                dim: self.dims[innermost].clone(),
                stride: self.stride[innermost],
            });
        }
        for pair in trailing.windows(2) {
            let (inner, outer) = (pair[0], pair[1]);
            let expected = self.shape[inner] * self.stride[inner];
            if self.stride[outer] != expected {
                return Err(LayoutError::NonContiguousTrailing {
                    dim: self.dims[outer].clone(),
                    stride: self.stride[outer],
                    expected,
                });
            }
        }

        let outermost = *trailing.last().unwrap();
        let span_elems = self.shape[outermost] * self.stride[outermost];

        // B and KV must sit outside the span or block reads would overlap
        // neighbouring blocks.
        for (label, d) in [
            (BLOCK_DIM, self.dim_index(BLOCK_DIM)),
            (KV_DIM, self.dim_index(KV_DIM)),
        ] {
            if self.shape[d] > 1 && self.stride[d] < span_elems {
                return Err(LayoutError::BlockDimInsideSpan {
                    dim: label,
                    stride: self.stride[d],
                    span: span_elems,
                });
            }
        }

        span_elems
            .checked_mul(self.element_size as u64)
            .ok_or(LayoutError::Overflow)
    }

    /// Region-absolute byte spans of one block: one span per KV sub-tensor,
    /// each `block_span_bytes` long. Spans of a valid layout are pairwise
    /// disjoint.
    pub fn block_to_spans(&self, block_id: u64) -> Result<Vec<ByteSpan>, LayoutError> {
        let blocks = self.block_count();
        if block_id >= blocks {
            return Err(LayoutError::BlockOutOfRange {
                block: block_id,
                blocks,
            });
        }
        let span_len = self.block_span_bytes()?;
        let b = self.dim_index(BLOCK_DIM);
        let kv = self.dim_index(KV_DIM);
        let mut index = vec![0u64; self.ndims()];
        index[b] = block_id;

        let mut spans = Vec::with_capacity(self.kv_count() as usize);
        for kv_idx in 0..self.kv_count() {
            index[kv] = kv_idx;
            let rel = self.element_offset(&index)?;
            let offset = self
                .base_address
                .checked_add(rel)
                .ok_or(LayoutError::Overflow)?;
            spans.push(ByteSpan::new(offset, span_len));
        }
        Ok(spans)
    }

    /// Serialize to the fixed little-endian wire frame:
    /// `u64 base; u8 ndims; ndims × (u8 len + label); ndims × u64 shape;
    /// ndims × u64 stride; u32 element_size`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.ndims() * 20);
        out.extend_from_slice(&self.base_address.to_le_bytes());
        out.push(self.ndims() as u8);
        for d in &self.dims {
            out.push(d.len() as u8);
            out.extend_from_slice(d.as_bytes());
        }
        for &s in &self.shape {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for &s in &self.stride {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&self.element_size.to_le_bytes());
        out
    }

    /// Parse and validate a wire frame produced by [`TensorLayout::encode`].
    pub fn decode(bytes: &[u8]) -> Result<Self, LayoutError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let base = cur.u64()?;
        let ndims = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            let len = cur.u8()? as usize;
            let raw = cur.take(len)?;
            dims.push(
                std::str::from_utf8(raw)
                    .map_err(|_| LayoutError::BadLabel)?
                    .to_string(),
            );
        }
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(cur.u64()?);
        }
        let mut stride = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            stride.push(cur.u64()?);
        }
        let element_size = cur.u32()?;
        if cur.pos != bytes.len() {
            return Err(LayoutError::TrailingBytes(bytes.len() - cur.pos));
        }
        TensorLayout::new(base, dims, shape, stride, element_size)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], LayoutError> {
        if self.pos + n > self.bytes.len() {
            return Err(LayoutError::Truncated {
                needed: self.pos + n,
                had: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, LayoutError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, LayoutError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, LayoutError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// The worked-example layout: shape B=10, KV=2, L=16, H=2, D=128,
    /// stride (4096, 40960, 256, 128, 1), bfloat16 elements.
    pub fn example_layout() -> TensorLayout {
        TensorLayout::new(
            0,
            ["B", "KV", "L", "H", "D"].map(String::from).to_vec(),
            vec![10, 2, 16, 2, 128],
            vec![4096, 40960, 256, 128, 1],
            2,
        )
        .unwrap()
    }

    /// Independent oracle: enumerate every element of the sub-tensor at
    /// (block, kv) and collect its byte offsets one element at a time.
    fn enumerate_subtensor_offsets(layout: &TensorLayout, block: u64, kv: u64) -> Vec<u64> {
        let trailing: Vec<usize> = (0..layout.ndims())
            .filter(|&d| layout.dims()[d] != BLOCK_DIM && layout.dims()[d] != KV_DIM)
            .collect();
        let mut offsets = Vec::new();
        let mut index = vec![0u64; layout.ndims()];
        let b = layout.dims().iter().position(|d| d == BLOCK_DIM).unwrap();
        let k = layout.dims().iter().position(|d| d == KV_DIM).unwrap();
        index[b] = block;
        index[k] = kv;

        fn walk(
            layout: &TensorLayout,
            trailing: &[usize],
            depth: usize,
            index: &mut Vec<u64>,
            offsets: &mut Vec<u64>,
        ) {
            if depth == trailing.len() {
                let mut elems = 0u64;
                for (d, &i) in index.iter().enumerate() {
                    elems += i * layout.stride()[d];
                }
                for byte in 0..layout.element_size() as u64 {
                    offsets.push(layout.base_address() + elems * layout.element_size() as u64 + byte);
                }
                return;
            }
            let d = trailing[depth];
            for i in 0..layout.shape()[d] {
                index[d] = i;
                walk(layout, trailing, depth + 1, index, offsets);
            }
            index[d] = 0;
        }
        walk(layout, &trailing, 0, &mut index, &mut offsets);
        offsets
    }

    #[test]
    fn element_offset_worked_example() {
        let layout = example_layout();
        // K tensor of block 8: dot((8,0,0,0,0),(4096,40960,256,128,1)) * 2
        assert_eq!(layout.element_offset(&[8, 0, 0, 0, 0]).unwrap(), 65536);
        // all-zero index
        assert_eq!(layout.element_offset(&[0, 0, 0, 0, 0]).unwrap(), 0);
        // V tensor of block 8: (8*4096 + 1*40960) * 2 = 147456
        assert_eq!(layout.element_offset(&[8, 1, 0, 0, 0]).unwrap(), 147456);
    }

    #[test]
    fn element_offset_errors() {
        let layout = example_layout();
        assert!(matches!(
            layout.element_offset(&[0, 0, 0]),
            Err(LayoutError::IndexArity { expected: 5, got: 3 })
        ));
        assert!(matches!(
            layout.element_offset(&[10, 0, 0, 0, 0]),
            Err(LayoutError::IndexOutOfBounds { .. })
        ));
    }

    #[test]
    fn block_span_worked_example() {
        let layout = example_layout();
        // trailing dim with the largest stride is L: 16 * 256 * 2 = 8192
        assert_eq!(layout.block_span_bytes().unwrap(), 8192);
    }

    #[test]
    fn block_span_degenerate_single_element() {
        let layout = TensorLayout::new(
            0,
            ["B", "KV", "L", "H", "D"].map(String::from).to_vec(),
            vec![4, 2, 1, 1, 1],
            vec![1, 4, 1, 1, 1],
            2,
        )
        .unwrap();
        assert_eq!(layout.block_span_bytes().unwrap(), 2);
    }

    #[test]
    fn block_span_derived_from_enumeration() {
        // L=16, H=2, D=64, canonical strides: enumeration of one sub-tensor
        // must form one dense range of exactly the advertised length.
        let layout = TensorLayout::canonical(0, 4, 16, 2, 64, 2).unwrap();
        let span = layout.block_span_bytes().unwrap();
        assert_eq!(span, 4096); // 16 * 2 * 64 * 2 bytes

        let mut offsets = enumerate_subtensor_offsets(&layout, 2, 1);
        offsets.sort_unstable();
        assert_eq!(offsets.len() as u64, span);
        let first = offsets[0];
        for (i, &o) in offsets.iter().enumerate() {
            assert_eq!(o, first + i as u64, "sub-tensor bytes must be dense");
        }
        let spans = layout.block_to_spans(2).unwrap();
        assert_eq!(spans[1].offset, first);
        assert_eq!(spans[1].len, span);
    }

    #[test]
    fn block_span_rejects_non_contiguous_trailing() {
        // H stride padded from 128 to 160: L no longer chains over H.
        let layout = TensorLayout::new(
            0,
            ["B", "KV", "L", "H", "D"].map(String::from).to_vec(),
            vec![10, 2, 16, 2, 128],
            vec![5120, 51200, 320, 160, 1],
            2,
        )
        .unwrap();
        assert!(matches!(
            layout.block_span_bytes(),
            Err(LayoutError::NonContiguousTrailing { .. })
        ));
        assert!(layout.block_to_spans(0).is_err());
    }

    #[test]
    fn block_span_rejects_strided_innermost() {
        let layout = TensorLayout::new(
            0,
            ["B", "KV", "D"].map(String::from).to_vec(),
            vec![4, 2, 8],
            vec![16, 64, 2],
            2,
        )
        .unwrap();
        assert!(matches!(
            layout.block_span_bytes(),
            Err(LayoutError::InnerStrideNotOne { .. })
        ));
    }

    #[test]
    fn block_to_spans_worked_example() {
        let layout = example_layout();
        let spans = layout.block_to_spans(8).unwrap();
        assert_eq!(
            spans,
            vec![ByteSpan::new(65536, 8192), ByteSpan::new(147456, 8192)]
        );
        let spans0 = layout.block_to_spans(0).unwrap();
        assert_eq!(
            spans0,
            vec![ByteSpan::new(0, 8192), ByteSpan::new(81920, 8192)]
        );
        assert!(matches!(
            layout.block_to_spans(10),
            Err(LayoutError::BlockOutOfRange { .. })
        ));
    }

    #[test]
    fn spans_partition_payload() {
        let layout = example_layout();
        let span = layout.block_span_bytes().unwrap();
        let mut all: Vec<ByteSpan> = Vec::new();
        for b in 0..layout.block_count() {
            all.extend(layout.block_to_spans(b).unwrap());
        }
        assert_eq!(all.len() as u64, layout.block_count() * layout.kv_count());
        all.sort_by_key(|s| s.offset);
        for pair in all.windows(2) {
            assert!(pair[0].end() <= pair[1].offset, "spans must not overlap");
        }
        let covered: u64 = all.iter().map(|s| s.len).sum();
        assert_eq!(covered, layout.block_count() * layout.kv_count() * span);
        // the example layout is fully dense: spans tile the tensor exactly
        assert_eq!(covered, layout.region_bytes().unwrap());
    }

    #[test]
    fn region_bytes_worked_example() {
        // 10 blocks x 2 sub-tensors x 8192 B
        assert_eq!(example_layout().region_bytes().unwrap(), 163840);
    }

    #[test]
    fn constructor_rejects_malformed() {
        let dims = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(matches!(
            TensorLayout::new(0, dims(&["B", "KV"]), vec![1], vec![1, 1], 2),
            Err(LayoutError::ArityMismatch { .. })
        ));
        assert!(matches!(
            TensorLayout::new(0, dims(&["B"]), vec![1], vec![1], 2),
            Err(LayoutError::TooFewDims(1))
        ));
        assert!(matches!(
            TensorLayout::new(0, dims(&["B", "L"]), vec![2, 2], vec![2, 1], 2),
            Err(LayoutError::MissingOrDuplicateDim("KV"))
        ));
        assert!(matches!(
            TensorLayout::new(0, dims(&["KV", "L"]), vec![2, 2], vec![2, 1], 2),
            Err(LayoutError::MissingOrDuplicateDim("B"))
        ));
        assert!(matches!(
            TensorLayout::new(0, dims(&["B", "KV"]), vec![0, 2], vec![2, 1], 2),
            Err(LayoutError::ZeroExtent(_))
        ));
        assert!(matches!(
            TensorLayout::new(0, dims(&["B", "KV"]), vec![2, 2], vec![0, 1], 2),
            Err(LayoutError::ZeroStride(_))
        ));
        assert!(matches!(
            TensorLayout::new(0, dims(&["B", "KV"]), vec![2, 2], vec![2, 1], 0),
            Err(LayoutError::ZeroElementSize)
        ));
        // equal strides with extents > 1 alias: (0,1) and (1,0) collide
        assert!(matches!(
            TensorLayout::new(0, dims(&["KV", "B"]), vec![2, 2], vec![1, 1], 2),
            Err(LayoutError::Aliasing { .. })
        ));
    }

    #[test]
    fn codec_round_trips_worked_example() {
        let layout = example_layout();
        let bytes = layout.encode();
        let back = TensorLayout::decode(&bytes).unwrap();
        assert_eq!(back, layout);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn codec_rejects_malformed() {
        let bytes = example_layout().encode();
        // truncation at every prefix length fails
        for cut in 0..bytes.len() {
            assert!(TensorLayout::decode(&bytes[..cut]).is_err());
        }
        // trailing garbage
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(
            TensorLayout::decode(&extended),
            Err(LayoutError::TrailingBytes(1))
        ));
        // a frame claiming 1 dimension decodes but fails validation
        let one_dim = TensorLayout {
            base_address: 0,
            dims: vec!["B".into()],
            shape: vec![4],
            stride: vec![1],
            element_size: 2,
        }
        .encode();
        assert!(TensorLayout::decode(&one_dim).is_err());
    }

    /// Small random layouts built by shuffling canonical dims and extents.
    fn arb_layout() -> impl Strategy<Value = TensorLayout> {
        (
            1u64..6,   // blocks
            1u64..5,   // tokens per block
            1u64..4,   // heads
            1u64..9,   // head dim
            prop::sample::select(vec![1u32, 2, 4]),
            0u64..64, // base address
        )
            .prop_map(|(b, l, h, d, elem, base)| {
                TensorLayout::canonical(base, b, l, h, d, elem).unwrap()
            })
    }

    proptest! {
        /// Offset oracle equivalence: element_offset agrees with per-element
        /// enumeration for every index of layouts up to 10^4 elements.
        #[test]
        fn offset_matches_enumeration(layout in arb_layout()) {
            prop_assume!(layout.element_count() <= 10_000);
            let ndims = layout.ndims();
            let mut index = vec![0u64; ndims];
            'all: loop {
                let mut elems = 0u64;
                for d in 0..ndims {
                    elems += index[d] * layout.stride()[d];
                }
                let expect = elems * layout.element_size() as u64;
                prop_assert_eq!(layout.element_offset(&index).unwrap(), expect);

                // odometer increment
                let mut d = ndims;
                loop {
                    if d == 0 { break 'all; }
                    d -= 1;
                    index[d] += 1;
                    if index[d] < layout.shape()[d] { break; }
                    index[d] = 0;
                }
            }
        }

        /// Partition: block spans tile the KV payload exactly once.
        #[test]
        fn spans_tile_exactly(layout in arb_layout()) {
            let span = layout.block_span_bytes().unwrap();
            let mut all: Vec<ByteSpan> = Vec::new();
            for b in 0..layout.block_count() {
                all.extend(layout.block_to_spans(b).unwrap());
            }
            all.sort_by_key(|s| s.offset);
            for pair in all.windows(2) {
                prop_assert!(pair[0].end() <= pair[1].offset);
            }
            let covered: u64 = all.iter().map(|s| s.len).sum();
            prop_assert_eq!(covered, layout.block_count() * layout.kv_count() * span);
        }

        /// Wire codec: decode(encode(x)) == x and encodings are byte-stable.
        #[test]
        fn codec_round_trip(layout in arb_layout()) {
            let bytes = layout.encode();
            let back = TensorLayout::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &layout);
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
