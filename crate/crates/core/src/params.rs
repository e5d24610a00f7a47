//! Named parameter registry shared by the eager forward pass, the tape and
//! the optimizer.

use std::collections::HashMap;

use crate::binarize::BinaryConvParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Dense(Tensor),
    /// Latent weights of a binarized conv plus their derived scale and bits.
    Binary(BinaryConvParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: ParamValue,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

impl ParamEntry {
    pub fn tensor(&self) -> &Tensor {
        match &self.value {
            ParamValue::Dense(t) => t,
            ParamValue::Binary(b) => b.latent(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, value: ParamValue, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "parameter {name:?} registered twice"
            )));
        }
        if !value_tensor(&value).all_finite() {
            return Err(Error::NonFinite("parameter initialization"));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add_dense(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        self.push(name, ParamValue::Dense(t), true)
    }

    pub fn add_buffer(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        self.push(name, ParamValue::Dense(t), false)
    }

    pub fn add_binary(&mut self, name: &str, p: BinaryConvParams) -> Result<ParamId> {
        self.push(name, ParamValue::Binary(p), true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    /// Dense value, or latent weights of a binarized conv.
    pub fn tensor(&self, id: ParamId) -> &Tensor {
        self.entries[id.0].tensor()
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        self.tensor(id).data()
    }

    /// Mutable access to the raw tensor. Binarized weights are NOT
    /// re-derived; call [`Self::refresh_binary`] afterwards if needed.
    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        match &mut self.entries[id.0].value {
            ParamValue::Dense(t) => t,
            ParamValue::Binary(b) => b.latent_mut(),
        }
    }

    /// Replaces a value by name, keeping kind and shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self.id(name)?;
        self.tensor(id).expect_same_shape(&t)?;
        *self.tensor_mut(id) = t;
        if let ParamValue::Binary(b) = &mut self.entries[id.0].value {
            b.refresh()?;
        }
        Ok(())
    }

    pub fn binary(&self, id: ParamId) -> Option<&BinaryConvParams> {
        match &self.entries[id.0].value {
            ParamValue::Binary(b) => Some(b),
            ParamValue::Dense(_) => None,
        }
    }

    pub fn binary_mut(&mut self, id: ParamId) -> Option<&mut BinaryConvParams> {
        match &mut self.entries[id.0].value {
            ParamValue::Binary(b) => Some(b),
            ParamValue::Dense(_) => None,
        }
    }

    pub fn expect_binary(&self, id: ParamId) -> Result<&BinaryConvParams> {
        self.binary(id).ok_or_else(|| {
            Error::InvalidArgument(format!("{:?} is not a binarized conv weight", self.name(id)))
        })
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Element count over trainable parameters.
    pub fn trainable_elements(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor().len() as u64)
            .sum()
    }

    /// Re-derives scale and sign bits of every binarized weight.
    pub fn refresh_binary(&mut self) -> Result<()> {
        for e in &mut self.entries {
            if let ParamValue::Binary(b) = &mut e.value {
                b.refresh()?;
            }
        }
        Ok(())
    }
}

fn value_tensor(v: &ParamValue) -> &Tensor {
    match v {
        ParamValue::Dense(t) => t,
        ParamValue::Binary(b) => b.latent(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_basics() {
        let mut s = ParamStore::new();
        let a = s.add_dense("a", Tensor::zeros(&[3]).unwrap()).unwrap();
        let _ = s.add_buffer("a.mean", Tensor::zeros(&[3]).unwrap()).unwrap();
        let w = BinaryConvParams::new(Tensor::full(&[2, 2, 1, 1], 0.5).unwrap(), 1.0).unwrap();
        let b = s.add_binary("w", w).unwrap();
        assert!(s.add_dense("a", Tensor::zeros(&[1]).unwrap()).is_err());
        assert_eq!(s.id("w").unwrap(), b);
        assert_eq!(s.trainable_ids(), vec![a, b]);
        assert_eq!(s.trainable_elements(), 7);
        assert!(s.binary(b).is_some() && s.binary(a).is_none());
        assert!(matches!(s.id("nope"), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn set_refreshes_binary() {
        let mut s = ParamStore::new();
        let w = BinaryConvParams::new(Tensor::full(&[1, 2, 1, 1], 0.5).unwrap(), 1.0).unwrap();
        let id = s.add_binary("w", w).unwrap();
        s.set("w", Tensor::new(&[1, 2, 1, 1], vec![1.0, -3.0]).unwrap()).unwrap();
        assert_eq!(s.binary(id).unwrap().scale(), 2.0);
        assert!(s.set("w", Tensor::zeros(&[2]).unwrap()).is_err());
    }
}
