use rand::Rng;

use super::{Gradients, ParameterStore};
use crate::Error;

/// A single scalar inside a named parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coordinate {
    pub name: String,
    pub index: usize,
}

/// Below this magnitude the comparison falls back to absolute error.
const ABS_FALLBACK: f64 = 1e-8;

/// Compares analytic gradients with five-point central differences at `coords`.
///
/// `loss_fn` returns the loss and its analytic gradients for a given store.
/// The store is perturbed in place and restored before returning. Returns
/// the worst relative error.
pub fn grad_check<F>(store: &mut ParameterStore<f64>, loss_fn: F, coords: &[Coordinate], h: f64) -> Result<f64, Error>
where
    F: Fn(&ParameterStore<f64>) -> (f64, Gradients<f64>),
{
    let (loss, analytic) = loss_fn(store);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, value: loss });
    }
    let mut worst = 0.0f64;
    for c in coords {
        let original = store.value(&c.name).data()[c.index];
        let a = analytic.get(&c.name).map_or(0.0, |g| g.data()[c.index]);

        let mut at = |offset: f64| -> Result<f64, Error> {
            set(store, c, original + offset);
            let (value, _) = loss_fn(store);
            if value.is_finite() {
                Ok(value)
            } else {
                Err(Error::NonFiniteLoss { step: 0, value })
            }
        };
        let samples = [at(2.0 * h), at(h), at(-h), at(-2.0 * h)];
        set(store, c, original);
        let [p2, p1, m1, m2] = samples;
        let (p2, p1, m1, m2) = (p2?, p1?, m1?, m2?);
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

fn set(store: &mut ParameterStore<f64>, c: &Coordinate, value: f64) {
    store.get_mut(&c.name).expect("coordinate names a parameter").data_mut()[c.index] = value;
}

pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < ABS_FALLBACK {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Draws `count` coordinates, cycling through the parameters in name order
/// so that small tensors are sampled as often as large ones.
pub fn sample_coordinates<R: Rng>(store: &ParameterStore<f64>, count: usize, rng: &mut R) -> Vec<Coordinate> {
    let tensors: Vec<(&str, usize)> = store.iter().map(|(n, t)| (n, t.len())).filter(|&(_, len)| len > 0).collect();
    if tensors.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|k| {
            let (name, len) = tensors[k % tensors.len()];
            Coordinate { name: name.to_string(), index: rng.random_range(0..len) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    fn store_with(name: &str, values: &[f64]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert(name, Tensor::from_f64(&[values.len()], values));
        s
    }

    #[test]
    fn quadratic_at_three() {
        let mut s = store_with("x", &[3.0]);
        let f = |s: &ParameterStore<f64>| {
            let mut t = Tape::new(s);
            let x = t.param("x");
            let y = t.mul(x, x);
            let l = t.sum(y);
            let g = t.backward(l);
            (t.value(l).data()[0], g)
        };
        assert_eq!(f(&s).1.get("x").unwrap().data()[0], 6.0);
        let coords = [Coordinate { name: "x".into(), index: 0 }];
        let err = grad_check(&mut s, f, &coords, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
        assert_eq!(s.value("x").data()[0], 3.0);
    }

    #[test]
    fn linear_sum_has_unit_gradient() {
        let mut s = store_with("x", &[0.5, -2.0, 7.25]);
        let f = |s: &ParameterStore<f64>| {
            let mut t = Tape::new(s);
            let x = t.param("x");
            let l = t.sum(x);
            let g = t.backward(l);
            (t.value(l).data()[0], g)
        };
        let (_, g) = f(&s);
        assert_eq!(g.get("x").unwrap().data(), &[1.0, 1.0, 1.0]);
        let coords: Vec<_> = (0..3).map(|i| Coordinate { name: "x".into(), index: i }).collect();
        assert!(grad_check(&mut s, f, &coords, 1e-5).unwrap() < 1e-9);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut s = store_with("x", &[0.0]);
        let f = |s: &ParameterStore<f64>| {
            let mut t = Tape::new(s);
            let x = t.param("x");
            let l = t.log_eps(x, 0.0);
            let g = t.backward(l);
            (t.value(l).data()[0], g)
        };
        let coords = [Coordinate { name: "x".into(), index: 0 }];
        assert!(matches!(grad_check(&mut s, f, &coords, 1e-5), Err(Error::NonFiniteLoss { .. })));
    }
}
