//! Named parameter storage and the Adam update.
//!
//! Every learnable weight in a model lives in one `ParamStore`, keyed by a
//! unique dotted path. Modules hold `ParamId` handles; the recording graph
//! copies parameter values in at leaf creation and accumulates gradients
//! back out after `backward`. Keeping all state in one flat store makes
//! weight sharing, checkpointing, and finite-difference checks trivial.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    /// Adam first/second moment buffers plus step counter.
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub adam_t: u64,
}

#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter with explicit initial values.
    pub fn register(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: shape/data mismatch"
        );
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let n = data.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data,
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            adam_t: 0,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn register_normal(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        std: f64,
        rng: &mut SeededRng,
    ) -> ParamId {
        let n = shape.iter().product();
        let mut data = vec![0.0; n];
        rng.fill_normal(&mut data, 0.0, std);
        self.register(name, shape, data)
    }

    pub fn register_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.register(name, shape, vec![0.0; n])
    }

    pub fn register_full(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        let n = shape.iter().product();
        self.register(name, shape, vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// One Adam step over every parameter, consuming the accumulated
    /// gradients (cleared afterwards). Standard bias-corrected update.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        for e in &mut self.entries {
            if e.grad.iter().any(|g| g.is_nan()) {
                return Err(Error::Numeric(format!(
                    "NaN gradient in parameter {}",
                    e.name
                )));
            }
            e.adam_t += 1;
            let bc1 = 1.0 - beta1.powi(e.adam_t as i32);
            let bc2 = 1.0 - beta2.powi(e.adam_t as i32);
            for i in 0..e.data.len() {
                let g = e.grad[i];
                e.adam_m[i] = beta1 * e.adam_m[i] + (1.0 - beta1) * g;
                e.adam_v[i] = beta2 * e.adam_v[i] + (1.0 - beta2) * g * g;
                let m_hat = e.adam_m[i] / bc1;
                let v_hat = e.adam_v[i] / bc2;
                e.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = ParamStore::new();
        let id = store.register("w", vec![3], vec![1.0, -2.0, 0.5]);
        store.adam_step(1e-3, 0.9, 0.99, 1e-8).unwrap();
        assert_eq!(store.get(id).data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.register("w", vec![2], vec![0.0, 0.0]);
        store.get_mut(id).grad = vec![3.0, -0.25];
        let lr = 1e-2;
        store.adam_step(lr, 0.9, 0.99, 1e-8).unwrap();
        let w = &store.get(id).data;
        // First bias-corrected step is -lr * g/(|g| + eps): -sign(g)*lr up to
        // a tiny eps correction.
        assert!((w[0] + lr).abs() < 1e-6);
        assert!((w[1] - lr).abs() < 1e-6);
        // Gradients cleared.
        assert!(store.get(id).grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn repeated_steps_descend_a_quadratic() {
        // f(w) = 0.5*(w-3)^2, grad = w-3.
        let mut store = ParamStore::new();
        let id = store.register("w", vec![1], vec![0.0]);
        let loss = |w: f64| 0.5 * (w - 3.0) * (w - 3.0);
        let l0 = loss(store.get(id).data[0]);
        for _ in 0..2 {
            let w = store.get(id).data[0];
            store.get_mut(id).grad = vec![w - 3.0];
            store.adam_step(0.1, 0.9, 0.99, 1e-8).unwrap();
        }
        let l2 = loss(store.get(id).data[0]);
        assert!(l2 < l0, "loss should decrease: {l0} -> {l2}");
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut store = ParamStore::new();
        let id = store.register("enc.w", vec![1], vec![0.0]);
        store.get_mut(id).grad = vec![f64::NAN];
        let err = store.adam_step(1e-3, 0.9, 0.99, 1e-8).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.register("w", vec![1], vec![0.0]);
        store.register("w", vec![1], vec![0.0]);
    }
}
