use indexmap::IndexMap;

use super::{Gradients, Real, Result, Tape, Tensor, TensorError, Var};

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Subset of tensors whose names satisfy `keep`, order preserved.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>, requires_grad: bool) -> Binding<'a, T> {
        let vars = self
            .tensors
            .values()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        Binding { store: self, vars }
    }
}

/// A [`ParamStore`] registered on a tape.
#[derive(Debug)]
pub struct Binding<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Var>,
}

impl<'a, T: Real> Binding<'a, T> {
    /// Pairs already-registered nodes with `store`, one per tensor in order.
    pub fn from_vars(store: &'a ParamStore<T>, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Binding::from_vars",
                lhs: vec![store.len()],
                rhs: vec![vars.len()],
            });
        }
        Ok(Self { store, vars })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient per bound tensor, in store order; zeros where none flowed.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> Vec<Vec<T>> {
        self.store
            .iter()
            .zip(&self.vars)
            .map(|((_, t), &v)| grads.get(v).map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec))
            .collect()
    }

    /// Largest absolute gradient over the bound tensors; zero when none flowed.
    pub fn max_abs_grad(&self, grads: &Gradients<T>) -> T {
        self.vars
            .iter()
            .filter_map(|&v| grads.get(v))
            .flat_map(|g| g.iter())
            .fold(T::zero(), |acc, x| acc.max(x.abs()))
    }
}
