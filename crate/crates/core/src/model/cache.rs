// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::tensor::Tensor;

/// Per-layer key/value history for positions `0..len`.
///
/// Keys and values are `[len × D]` matrices, one pair per layer; an empty
/// cache stores no matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeCache {
    layers: Vec<(Tensor, Tensor)>,
    len: usize,
}

impl DecodeCache {
    pub fn empty() -> Self {
        Self::default()
    }

    pub(crate) fn from_parts(layers: Vec<(Tensor, Tensor)>, len: usize) -> Self {
        debug_assert!(layers.iter().all(|(k, v)| k.rows() == len && v.rows() == len));
        Self { layers, len }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }
}
