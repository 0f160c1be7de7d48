// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use super::{ModelConfig, TinyTransformer};
use crate::checkpoint::Container;
use crate::error::{Error, Result};

impl TinyTransformer {
    pub fn to_container(&self) -> Container {
        let c = &self.config;
        let mut out = Container::default();
        out.set("format", "model");
        out.set("vocab_size", c.vocab_size);
        out.set("hidden_size", c.hidden_size);
        out.set("embed_size", c.embed_size);
        out.set("layers", c.layers);
        out.set("heads", c.heads);
        out.set("max_seq_len", c.max_seq_len);
        out.set("seed", c.seed);
        for (name, t) in self.parameters() {
            out.push(&name, t);
        }
        out
    }

    /// Rebuilds a model; shapes come from the config block.
    pub fn from_container(c: &Container) -> Result<Self> {
        if c.get("format")? != "model" {
            return Err(Error::Format(format!("not a model checkpoint: {}", c.get("format")?)));
        }
        let config = ModelConfig {
            vocab_size: c.get_usize("vocab_size")?,
            hidden_size: c.get_usize("hidden_size")?,
            embed_size: c.get_usize("embed_size")?,
            layers: c.get_usize("layers")?,
            heads: c.get_usize("heads")?,
            max_seq_len: c.get_usize("max_seq_len")?,
            seed: c
                .get("seed")?
                .parse()
                .map_err(|e| Error::Format(format!("seed: {e}")))?,
        };
        let mut model = TinyTransformer::new(config)?;
        let shapes: Vec<Vec<usize>> = model.parameters().iter().map(|(_, t)| t.shape().to_vec()).collect();
        if shapes.len() != c.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, architecture needs {}",
                c.tensors.len(),
                shapes.len()
            )));
        }
        for (i, (slot, shape)) in model.parameters_mut().into_iter().zip(&shapes).enumerate() {
            *slot = c.take_tensor(i, shape)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
