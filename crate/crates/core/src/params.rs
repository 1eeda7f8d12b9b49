//! Named parameter buffers shared by the backbone, MPE, STM and head.
//!
//! Parameters live outside any tape; each training step inserts them as
//! leaves (trainable ones with gradients enabled), runs forward/backward,
//! then applies updates back into these buffers. Insertion order is the
//! declaration order, which keeps every run bit-reproducible.

use crate::checkpoint::Checkpoint;
use crate::tensor::{Result, Tape, TensorId};

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, trainable: bool) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}");
        assert!(self.find(name).is_none(), "duplicate param {name}");
        self.params.push(Param { name: name.to_string(), shape, data, trainable });
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> &Param {
        self.find(name).unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.find_mut(name).unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        let idx = self.params.iter().position(|p| p.name == name)?;
        Some(self.params.remove(idx))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn set_trainable_by(&mut self, rule: impl Fn(&str) -> bool) {
        for p in self.params.iter_mut() {
            p.trainable = rule(&p.name);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.data.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Insert every parameter as a leaf on the tape, in declaration order.
    pub fn insert_on(&self, tape: &mut Tape) -> Result<TapeBinding> {
        let mut ids = Vec::with_capacity(self.params.len());
        for p in &self.params {
            ids.push(tape.leaf(p.data.clone(), p.shape.clone(), p.trainable)?);
        }
        Ok(TapeBinding { names: self.names(), ids })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for p in &self.params {
            ck.insert(&p.name, p.shape.clone(), p.data.clone());
        }
        ck
    }

    /// Overwrite matching parameters from a checkpoint; unknown checkpoint
    /// entries are ignored, missing ones are an error.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> std::result::Result<(), String> {
        for p in self.params.iter_mut() {
            let entry = ck
                .get(&p.name)
                .ok_or_else(|| format!("checkpoint is missing entry {}", p.name))?;
            if entry.dims != p.shape {
                return Err(format!(
                    "checkpoint entry {} has dims {:?}, expected {:?}",
                    p.name, entry.dims, p.shape
                ));
            }
            p.data = entry.values.clone();
        }
        Ok(())
    }
}

/// Mapping from parameter names to their leaf ids on a specific tape.
pub struct TapeBinding {
    names: Vec<String>,
    ids: Vec<TensorId>,
}

impl TapeBinding {
    pub fn id(&self, name: &str) -> TensorId {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.ids[i])
            .unwrap_or_else(|| panic!("param {name} not bound on tape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.names.iter().map(|s| s.as_str()).zip(self.ids.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_preserves_values() {
        let mut ps = ParamSet::new();
        ps.add("a.w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], true);
        ps.add("b.w", vec![3], vec![5.0, 6.0, 7.0], false);
        let ck = ps.to_checkpoint();
        let mut ps2 = ParamSet::new();
        ps2.add("a.w", vec![2, 2], vec![0.0; 4], true);
        ps2.add("b.w", vec![3], vec![0.0; 3], false);
        ps2.load_checkpoint(&ck).unwrap();
        assert_eq!(ps2.get("a.w").data, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ps2.get("b.w").data, vec![5.0, 6.0, 7.0]);
    }

    #[test]
    fn missing_entry_is_an_error() {
        let mut ps = ParamSet::new();
        ps.add("a.w", vec![1], vec![1.0], true);
        let ck = Checkpoint::new();
        assert!(ps.load_checkpoint(&ck).is_err());
    }

    #[test]
    fn binding_resolves_ids_in_order() {
        let mut ps = ParamSet::new();
        ps.add("x", vec![2], vec![1.0, 2.0], true);
        ps.add("y", vec![1], vec![3.0], false);
        let mut tape = Tape::new();
        let bind = ps.insert_on(&mut tape).unwrap();
        assert_eq!(tape.data(bind.id("x")), &[1.0, 2.0]);
        assert!(!tape.requires_grad(bind.id("y")));
        assert!(tape.requires_grad(bind.id("x")));
    }
}
