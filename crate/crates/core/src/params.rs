//! Named parameter storage shared by models, optimizer and checkpoints.

use rand::Rng;

use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform initialisation in `[-bound, bound]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace every tensor with `values`, which must match names and shapes.
    pub fn assign(&mut self, values: &[(String, Tensor)]) -> Result<(), String> {
        if values.len() != self.tensors.len() {
            return Err(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                values.len()
            ));
        }
        for (i, (name, t)) in values.iter().enumerate() {
            if name != &self.names[i] {
                return Err(format!("tensor {i}: expected {}, got {name}", self.names[i]));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    self.tensors[i].shape(),
                    t.shape()
                ));
            }
        }
        for (slot, (_, t)) in self.tensors.iter_mut().zip(values) {
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn assign_checks_names_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        p.add_uniform("w", &[2, 3], 0.5, &mut rng);
        p.add_zeros("b", &[3]);
        assert_eq!(p.numel(), 9);
        assert!(p.get(ParamId(0)).data().iter().all(|x| x.abs() <= 0.5));

        let mut vals = p.named();
        vals[1].1 = Tensor::ones(&[3]);
        p.assign(&vals).unwrap();
        assert_eq!(p.get(p.find("b").unwrap()).data(), &[1.0; 3]);

        vals[1].0 = "bias".into();
        assert!(p.assign(&vals).is_err());
        vals[1] = ("b".into(), Tensor::ones(&[4]));
        assert!(p.assign(&vals).is_err());
    }
}
