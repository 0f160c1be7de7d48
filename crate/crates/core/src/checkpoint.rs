// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint container shared by models and probes.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "HDMI1"                      magic + format version
//! config_len, config bytes     UTF-8 `key=value` lines
//! tensor_count
//! per tensor: numel, numel × f32 (little-endian), in declaration order
//! ```
//!
//! A sibling text manifest (`<path>.manifest`) repeats the config block and
//! lists each tensor's name and shape.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"HDMI1";

/// Named tensor stored in a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Decoded checkpoint: ordered config plus tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<Entry>,
}

impl Container {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint config lacks `{key}`")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)?
            .parse()
            .map_err(|e| Error::Format(format!("checkpoint key `{key}`: {e}")))
    }

    pub fn push(&mut self, name: &str, t: &Tensor) {
        self.tensors.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        });
    }

    /// Next tensor in declaration order, reshaped to `shape`.
    pub fn take_tensor(&self, index: usize, shape: &[usize]) -> Result<Tensor> {
        let e = self
            .tensors
            .get(index)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor #{index}")))?;
        let n: usize = shape.iter().product();
        if e.data.len() != n {
            return Err(Error::Format(format!(
                "tensor #{index} has {} values, expected {n} for shape {shape:?}",
                e.data.len()
            )));
        }
        Tensor::new(shape.to_vec(), e.data.iter().map(|&v| v as f64).collect())
    }

    fn config_text(&self) -> String {
        self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for e in &self.tensors {
            out.extend_from_slice(&(e.data.len() as u32).to_le_bytes());
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Decodes bytes; tensor names and shapes are not stored in the binary,
    /// so entries come back unnamed and flat until the owner reshapes them.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(5)? != MAGIC {
            return Err(Error::Format("bad magic, expected HDMI1".into()));
        }
        let cfg_len = cur.u32()? as usize;
        let cfg = std::str::from_utf8(cur.take(cfg_len)?)
            .map_err(|e| Error::Format(format!("config block is not UTF-8: {e}")))?;
        let mut config = Vec::new();
        for line in cfg.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line without `=`: {line}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for i in 0..count {
            let n = cur.u32()? as usize;
            let raw = cur.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Entry { name: format!("#{i}"), shape: vec![n], data });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Self { config, tensors })
    }

    pub fn manifest(&self) -> String {
        let mut s = self.config_text();
        for e in &self.tensors {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("tensor {} {}\n", e.name, dims.join("x")));
        }
        s
    }

    pub fn manifest_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".manifest");
        PathBuf::from(name)
    }

    /// Writes the binary and its manifest.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        fs::write(Self::manifest_path(path), self.manifest())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_config_and_values() {
        let mut c = Container::default();
        c.set("kind", "linear");
        c.set("classes", 3);
        c.push("w", &Tensor::matrix(2, 2, vec![1.0, -2.5, 0.125, 3.0]));
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.get("kind").unwrap(), "linear");
        assert_eq!(back.get_usize("classes").unwrap(), 3);
        assert_eq!(back.take_tensor(0, &[2, 2]).unwrap().data(), &[1.0, -2.5, 0.125, 3.0]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Container::from_bytes(b"HDMI2\0\0\0\0").is_err());
        let mut c = Container::default();
        c.push("w", &Tensor::vector(vec![1.0, 2.0]));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}
