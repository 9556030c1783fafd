//! Flat named parameter store. Model components hold `PId` handles; the
//! tensors themselves live here so the optimizer, checkpointing and
//! weight-copying can treat parameters uniformly.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to one parameter tensor inside a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PId(pub usize);

#[derive(Debug, Clone)]
pub struct Params<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    /// Register a parameter under a unique name.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> PId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
        PId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: PId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: PId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: PId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (PId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (PId(i), n.as_str(), t))
    }

    pub fn id_of(&self, name: &str) -> Option<PId> {
        self.entries.iter().position(|(n, _)| n == name).map(PId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Copy every tensor whose name starts with `src_prefix` onto the tensor
    /// with the same suffix under `dst_prefix`. Returns how many tensors were
    /// copied. Used to seed the flow stream from trained RGB-stream weights.
    pub fn copy_prefix(&mut self, src_prefix: &str, dst_prefix: &str) -> usize {
        let mut copies = Vec::new();
        for (i, (name, _)) in self.entries.iter().enumerate() {
            if let Some(suffix) = name.strip_prefix(src_prefix) {
                let dst_name = format!("{dst_prefix}{suffix}");
                if let Some(j) = self.entries.iter().position(|(n, _)| *n == dst_name) {
                    copies.push((i, j));
                }
            }
        }
        for &(src, dst) in &copies {
            let t = self.entries[src].1.clone();
            assert_eq!(
                t.shape(),
                self.entries[dst].1.shape(),
                "prefix copy shape mismatch"
            );
            self.entries[dst].1 = t;
        }
        copies.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_prefix_moves_matching_tensors() {
        let mut p = Params::<f64>::new();
        let a = p.add("rgb.enc.w", Tensor::full(&[2], 1.5));
        let b = p.add("flow.enc.w", Tensor::zeros(&[2]));
        assert_eq!(p.copy_prefix("rgb.", "flow."), 1);
        assert_eq!(p.get(b).data(), p.get(a).data());
    }
}
