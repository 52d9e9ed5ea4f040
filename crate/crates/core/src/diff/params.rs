use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named block of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    /// `(rows, cols)`; biases are `(1, cols)`.
    pub shape: (usize, usize),
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector with a named, contiguous layout.
///
/// Every network reads its weights by slot name; the trainers only ever see
/// the flat vector, which is what gradients and update directions are
/// expressed in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    layout: Vec<ParamSlot>,
    values: Vec<f64>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            layout: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a zero-filled slot and returns its offset.
    pub fn push_slot(&mut self, name: impl Into<String>, shape: (usize, usize)) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!(
                "duplicate parameter slot `{name}`"
            )));
        }
        let offset = self.values.len();
        let slot = ParamSlot {
            name: name.clone(),
            shape,
            offset,
        };
        self.values.resize(offset + slot.len(), 0.0);
        self.index.insert(name, self.layout.len());
        self.layout.push(slot);
        Ok(offset)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[ParamSlot] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::dims(
                "parameter vector",
                self.values.len(),
                values.len(),
            ));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    pub fn slot(&self, name: &str) -> Result<&ParamSlot> {
        self.index
            .get(name)
            .map(|&i| &self.layout[i])
            .ok_or_else(|| Error::UnknownSlot(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let range = self.slot(name)?.range();
        Ok(&self.values[range])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let range = self.slot(name)?.range();
        Ok(&mut self.values[range])
    }

    pub fn matrix(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        let slot = self.slot(name)?;
        let view = ArrayView2::from_shape(slot.shape, &self.values[slot.range()])
            .expect("slot shape matches its length");
        Ok(view)
    }

    pub fn matrix_owned(&self, name: &str) -> Result<Array2<f64>> {
        self.matrix(name).map(|m| m.to_owned())
    }

    /// Slots whose name starts with `prefix`.
    pub fn slots_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a ParamSlot> {
        self.layout
            .iter()
            .filter(move |s| s.name.starts_with(prefix))
    }

    /// Boolean mask over the flat vector, true on slots matching `prefix`.
    pub fn mask_for_prefix(&self, prefix: &str) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for slot in self.slots_with_prefix(prefix) {
            mask[slot.range()].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    /// Glorot-uniform weights, zero biases. Slots named `*.b` are biases.
    pub fn init_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for slot in &self.layout {
            let range = slot.range();
            if slot.name.ends_with(".b") {
                self.values[range].iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let (fan_in, fan_out) = slot.shape;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut self.values[range] {
                *v = rng.gen_range(-limit..=limit);
            }
        }
    }

    /// Checks the layout is contiguous, non-overlapping and covers the vector.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for slot in &self.layout {
            if slot.offset != cursor {
                return Err(Error::InvalidConfig(format!(
                    "slot `{}` starts at {} but previous slot ends at {cursor}",
                    slot.name, slot.offset
                )));
            }
            cursor += slot.len();
        }
        if cursor != self.values.len() {
            return Err(Error::dims("parameter layout", self.values.len(), cursor));
        }
        Ok(())
    }

    /// Restores the name index after deserialization.
    pub fn reindex(&mut self) -> Result<()> {
        self.validate()?;
        self.index = self
            .layout
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Ok(())
    }

    /// FNV-1a over the bit patterns of the values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.values {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut store: ParamStore = serde_json::from_str(s)?;
        store.reindex()?;
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.push_slot("a.0.w", (3, 2)).unwrap();
        p.push_slot("a.0.b", (1, 2)).unwrap();
        p.push_slot("b.0.w", (2, 1)).unwrap();
        p
    }

    #[test]
    fn layout_is_contiguous() {
        let p = store();
        p.validate().unwrap();
        assert_eq!(p.len(), 10);
        assert_eq!(p.slot("b.0.w").unwrap().offset, 8);
    }

    #[test]
    fn duplicate_slot_rejected() {
        let mut p = store();
        assert!(p.push_slot("a.0.w", (1, 1)).is_err());
    }

    #[test]
    fn names_resolve_to_disjoint_slices() {
        let mut p = store();
        p.get_mut("a.0.b").unwrap().copy_from_slice(&[7.0, 8.0]);
        assert_eq!(&p.values()[6..8], &[7.0, 8.0]);
        assert!(p.get("nope").is_err());
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut p = store();
        p.init_glorot(&mut ChaCha8Rng::seed_from_u64(1));
        let lim = (6.0f64 / 5.0).sqrt();
        assert!(p.get("a.0.w").unwrap().iter().all(|v| v.abs() <= lim));
        assert!(p.get("a.0.b").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let mut p = store();
        p.init_glorot(&mut ChaCha8Rng::seed_from_u64(9));
        let q = ParamStore::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p.checksum(), q.checksum());
        assert_eq!(q.slot("a.0.b").unwrap().offset, 6);
    }
}
