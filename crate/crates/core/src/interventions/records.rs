// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-sample intervention records: JSON lines plus a binary file holding
//! the intervened states as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub sample_id: usize,
    pub method: String,
    pub pre_margin: f64,
    pub post_margin: f64,
    pub pre_argmax: usize,
    pub post_argmax: usize,
    /// Byte offset of the intervened state in the companion state file.
    pub state_offset: u64,
}

/// Accumulates records and their states in memory.
#[derive(Debug, Clone, Default)]
pub struct RecordWriter {
    pub records: Vec<InterventionRecord>,
    states: Vec<u8>,
}

impl RecordWriter {
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        sample_id: usize,
        method: &str,
        pre_margin: f64,
        post_margin: f64,
        pre_argmax: usize,
        post_argmax: usize,
        state: &Tensor,
    ) {
        let state_offset = self.states.len() as u64;
        for v in state.data() {
            self.states.extend_from_slice(&v.to_le_bytes());
        }
        self.records.push(InterventionRecord {
            sample_id,
            method: method.to_string(),
            pre_margin,
            post_margin,
            pre_argmax,
            post_argmax,
            state_offset,
        });
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn state_bytes(&self) -> &[u8] {
        &self.states
    }

    pub fn write(&self, records_path: &Path, states_path: &Path) -> Result<()> {
        fs::write(records_path, self.to_jsonl()?)?;
        fs::write(states_path, &self.states)?;
        Ok(())
    }
}

pub fn parse_records(text: &str) -> Result<Vec<InterventionRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Reads a `dim`-length state stored at `offset`.
pub fn read_state(bytes: &[u8], offset: u64, dim: usize) -> Result<Tensor> {
    let start = offset as usize;
    let end = start + dim * 8;
    let raw = bytes
        .get(start..end)
        .ok_or_else(|| Error::Format(format!("state at offset {offset} runs past {} bytes", bytes.len())))?;
    Ok(Tensor::vector(
        raw.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    ))
}
