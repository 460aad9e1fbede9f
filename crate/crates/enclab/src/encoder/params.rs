//! Named parameter storage.
//!
//! Every model parameter lives here as a flat `f32` buffer with a shape and
//! a structured name. Names follow the scheme
//! `layer.<i>.<component>.<weight|bias>` for encoder layers (1-based, layer
//! 1 sits closest to the embeddings), `embeddings.<table>.weight` for the
//! embedding tables, and `<head>.weight` / `<head>.bias` for the heads.
//! Matrices are stored row-major as `(fan_in, fan_out)`.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Input size of a matrix parameter: the leading extent.
    pub fn fan_in(&self) -> usize {
        self.shape[0]
    }
}

/// Ordered, name-indexed parameter set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Vec<f32>, shape: Vec<usize>) -> Result<()> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Model(format!(
                "parameter {name}: {} values for shape {shape:?}",
                data.len()
            )));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Model(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, data, shape });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// SHA-256 over all payload bytes in parameter order. Used for freeze
    /// contracts and reproducibility checks.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for v in &p.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Checksum restricted to parameters accepted by `filter`.
    pub fn checksum_filtered(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| filter(&p.name)) {
            hasher.update(p.name.as_bytes());
            for v in &p.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Extract the 1-based encoder layer index from a parameter name, if the
/// parameter belongs to an encoder layer.
pub fn parse_layer_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("layer.")?;
    let (idx, _) = rest.split_once('.')?;
    idx.parse().ok()
}

/// FNV-1a hash of a parameter name; combined with a run seed this gives
/// each parameter its own deterministic RNG stream.
pub fn name_stream(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_and_lookup() {
        let mut ps = ParamSet::new();
        ps.insert("a.weight", vec![1.0, 2.0], vec![2, 1]).unwrap();
        ps.insert("a.bias", vec![0.0], vec![1]).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.get("a.weight").unwrap().fan_in(), 2);
        assert!(ps.insert("a.bias", vec![0.0], vec![1]).is_err());
        assert!(ps.insert("bad", vec![0.0], vec![2]).is_err());
    }

    #[test]
    fn layer_index_parsing() {
        assert_eq!(parse_layer_index("layer.3.attn_out.bias"), Some(3));
        assert_eq!(parse_layer_index("layer.12.ln1.weight"), Some(12));
        assert_eq!(parse_layer_index("embeddings.token.weight"), None);
        assert_eq!(parse_layer_index("cls_head.weight"), None);
    }

    #[test]
    fn checksum_sensitive_to_values_and_names() {
        let mut a = ParamSet::new();
        a.insert("x", vec![1.0], vec![1]).unwrap();
        let mut b = ParamSet::new();
        b.insert("x", vec![1.5], vec![1]).unwrap();
        let mut c = ParamSet::new();
        c.insert("y", vec![1.0], vec![1]).unwrap();
        assert_ne!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
        assert_eq!(a.checksum(), a.clone().checksum());
    }

    #[test]
    fn name_streams_differ_per_name() {
        let s1 = name_stream(42, "layer.1.attn_q.weight");
        let s2 = name_stream(42, "layer.2.attn_q.weight");
        assert_ne!(s1, s2);
        assert_eq!(s1, name_stream(42, "layer.1.attn_q.weight"));
    }
}
