use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::checksum::checksum_array;

/// Named parameters and non-trainable buffers (e.g. batch-norm running
/// statistics). Names are dot-separated paths; iteration is always sorted,
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f32>>,
    buffers: BTreeMap<String, ArrayD<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: &str, value: ArrayD<f32>) {
        let prev = self.params.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn add_buffer(&mut self, name: &str, value: ArrayD<f32>) {
        let prev = self.buffers.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate buffer {name}");
    }

    pub fn param(&self, name: &str) -> &ArrayD<f32> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut ArrayD<f32> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn buffer(&self, name: &str) -> &ArrayD<f32> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut ArrayD<f32> {
        self.buffers
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Number of parameter tensors.
    pub fn tensor_count(&self) -> usize {
        self.params.len()
    }

    /// Number of trainable scalars under a name prefix ("" for all).
    pub fn scalar_count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Content checksums for every parameter under a prefix.
    pub fn checksums(&self, prefix: &str) -> BTreeMap<String, String> {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), checksum_array(v)))
            .collect()
    }

    /// All tensors (params then buffers) for checkpointing.
    pub fn all_tensors(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.params().chain(self.buffers())
    }

    /// Restore params/buffers from a loaded tensor map. Every existing entry
    /// must be present with a matching shape; extra tensors are ignored.
    pub fn load_tensors(
        &mut self,
        tensors: &BTreeMap<String, ArrayD<f32>>,
    ) -> Result<(), String> {
        for (name, value) in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let src = tensors
                .get(name)
                .ok_or_else(|| format!("checkpoint is missing tensor {name}"))?;
            if src.shape() != value.shape() {
                return Err(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    value.shape()
                ));
            }
            value.assign(src);
        }
        Ok(())
    }
}
