use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Real, Tensor};
use crate::tensor_file::TensorSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(ParamId)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.values[self.id(name)?.0])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let id = self.id(name)?;
        Ok(&mut self.values[id.0])
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Put every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect()
    }

    fn push(&mut self, name: String, value: Tensor<T>) -> ParamId {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }
}

impl ParamStore<f32> {
    /// Store every tensor under `prefix + name`.
    pub fn export(&self, set: &mut TensorSet, prefix: &str) {
        for (n, v) in self.iter() {
            set.insert(format!("{prefix}{n}"), v.clone());
        }
    }

    /// Replace values with those in `set`; names and shapes must match.
    pub fn import(&mut self, set: &TensorSet, prefix: &str) -> Result<()> {
        for (n, v) in self.names.iter().zip(self.values.iter_mut()) {
            let t = set.get(&format!("{prefix}{n}"))?;
            if t.shape() != v.shape() {
                return Err(Error::shape("checkpoint", v.shape(), t.shape()));
            }
            *v = t.clone();
        }
        Ok(())
    }
}

/// A tape together with the bound parameter nodes.
pub struct Graph<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a [Var],
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a [Var]) -> Self {
        Self { tape, params }
    }

    #[inline]
    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }
}

/// Registers parameters with fan-in scaled uniform initialization.
pub struct Builder {
    store: ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..numel(shape))
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        self.store.push(name, Tensor::new(shape, data).expect("shape"))
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f32) -> ParamId {
        self.store.push(name, Tensor::full(shape, value))
    }

    pub fn finish(self) -> ParamStore<f32> {
        self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_is_deterministic_and_bounded() {
        let build = |seed| {
            let mut b = Builder::new(seed);
            b.uniform("a".into(), &[4, 9], 9);
            b.constant("g".into(), &[4], 1.0);
            b.finish()
        };
        let s = build(1);
        assert_eq!(s, build(1));
        assert_ne!(s, build(2));
        assert!(s.get("a").unwrap().data().iter().all(|v| v.abs() <= 1.0 / 3.0));
        assert_eq!(s.get("g").unwrap().data(), &[1.0; 4]);
        assert_eq!(s.num_scalars(), 40);
        assert!(matches!(s.get("nope"), Err(Error::MissingParam(_))));
    }

    #[test]
    fn export_import_round_trip() {
        let mut b = Builder::new(0);
        b.uniform("x.w".into(), &[2, 2], 2);
        let s = b.finish();
        let mut set = TensorSet::new();
        s.export(&mut set, "param/");
        let mut t = s.clone();
        t.values_mut()[0] = Tensor::zeros([2, 2]);
        t.import(&set, "param/").unwrap();
        assert_eq!(t, s);
    }
}
