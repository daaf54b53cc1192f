use std::collections::BTreeMap;

use super::{Real, Tensor};

/// Named parameters with paired gradient buffers, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, Entry<T>>,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry<T> {
    value: Tensor<T>,
    grad: Tensor<T>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore { entries: BTreeMap::new() }
    }

    /// Inserts or replaces a parameter; its gradient buffer is reset to zero.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name.into(), Entry { value, grad });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    /// Panics on an unknown name; model code only asks for names it registered.
    pub fn value(&self, name: &str) -> &Tensor<T> {
        self.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// `(name, value, grad)` triples for an optimizer step.
    pub fn iter_mut_with_grads(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &Tensor<T>)> {
        self.entries.iter_mut().map(|(k, e)| (k.as_str(), &mut e.value, &e.grad))
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `grads` into the gradient buffers. Unknown names are ignored.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (name, g) in &grads.0 {
            if let Some(e) = self.entries.get_mut(name) {
                e.grad.add_assign(g);
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (name, value) in self.iter() {
            out.insert(name, value.cast());
        }
        out
    }
}

/// Gradients produced by one backward pass, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T>(pub BTreeMap<String, Tensor<T>>);

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    /// Sums `other` into `self` in name order.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (name, g) in other.0 {
            match self.0.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.0.insert(name, g);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.0.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_sorted_and_grads_match_shapes() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("b.w", Tensor::zeros(&[2, 3]));
        s.insert("a.w", Tensor::zeros(&[4]));
        let names: Vec<_> = s.names().collect();
        assert_eq!(names, ["a.w", "b.w"]);
        for name in names {
            assert_eq!(s.grad(name).unwrap().shape(), s.value(name).shape());
        }
    }
}
