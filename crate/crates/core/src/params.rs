//! Named parameters, deterministic initialization, and tape binding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    /// Dot-separated path, unique within a store.
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub grad: Option<Tensor>,
}

/// 64-bit FNV-1a. Stable across platforms, used for name hashing and
/// checkpoint checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-stream generator derived from a global seed and a stream name.
pub fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(stream.as_bytes()).rotate_left(17))
}

/// Initialization rule.
pub enum Init {
    /// uniform(−s, s), `s = 1/√fan_in`.
    FanIn(usize),
    /// uniform(−s, s), `s = √(6/fan_in)`.
    He(usize),
    /// uniform(−s, s).
    Uniform(f64),
    Const(f64),
    /// Value from flat index and total length.
    Fn(Box<dyn Fn(usize, usize) -> f64>),
    /// Inverse-softplus of a log-uniform step in `[min, max]`.
    DtBias { min: f64, max: f64 },
}

/// Ordered collection of parameters. Initialization of each parameter is
/// driven by a stream keyed on `(seed, name)`, so adding a parameter never
/// perturbs the values of the others.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name `{name}`");
        let n: usize = shape.iter().product();
        let mut rng = stream_rng(self.seed, name);
        let data: Vec<f64> = match init {
            Init::FanIn(fan_in) => {
                let s = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-s..=s)).collect()
            }
            Init::He(fan_in) => {
                let s = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-s..=s)).collect()
            }
            Init::Uniform(s) => (0..n).map(|_| rng.random_range(-s..=s)).collect(),
            Init::Const(c) => vec![c; n],
            Init::Fn(f) => (0..n).map(|i| f(i, n)).collect(),
            Init::DtBias { min, max } => (0..n)
                .map(|_| {
                    let dt: f64 = rng.random_range(min.ln()..=max.ln()).exp();
                    // softplus⁻¹(dt) = dt + log(−expm1(−dt))
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect(),
        };
        self.params.push(Parameter {
            name: name.to_string(),
            tensor: Tensor::new(shape.to_vec(), data).expect("positive extents"),
            trainable: true,
            grad: None,
        });
        self.params.len() - 1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id]
    }

    /// Mutable tensor by name.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter as a leaf; the result is indexed by [`ParamId`].
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.tensor.clone(), p.trainable)).collect()
    }

    /// Adds gradients from a backward sweep into each parameter's `grad` slot.
    pub fn accumulate_grads(&mut self, grads: &Gradients, bound: &[Var]) {
        for (p, v) in self.params.iter_mut().zip(bound) {
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.get(v) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// `θ ← θ − lr·grad` for every trainable parameter with a gradient.
    /// Fails without modifying anything if any gradient is non-finite.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if let Some(p) = self
            .params
            .iter()
            .find(|p| p.grad.as_ref().is_some_and(|g| !g.is_finite()))
        {
            return Err(Error::NonFinite(format!("gradient of parameter `{}`", p.name)));
        }
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            if let Some(g) = &p.grad {
                for (w, gv) in p.tensor.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * gv;
                }
            }
        }
        Ok(())
    }

    /// Name of the first parameter holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params.iter().find(|p| !p.tensor.is_finite()).map(|p| p.name.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_not_order() {
        let mut a = ParamStore::new(3);
        a.add("x", &[4], Init::FanIn(4));
        a.add("y", &[4], Init::FanIn(4));
        let mut b = ParamStore::new(3);
        b.add("y", &[4], Init::FanIn(4));
        assert_eq!(a.get(1).tensor, b.get(0).tensor);
    }

    #[test]
    fn fan_in_bound() {
        let mut s = ParamStore::new(0);
        let id = s.add("w", &[64, 16], Init::FanIn(16));
        assert!(s.get(id).tensor.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn dt_bias_softplus_in_range() {
        let mut s = ParamStore::new(1);
        let id = s.add("b", &[500], Init::DtBias { min: 1e-3, max: 1e-1 });
        for &b in s.get(id).tensor.data() {
            let dt = crate::tensor::softplus(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0);
        s.add("w", &[1], Init::Const(0.0));
        s.add("w", &[1], Init::Const(0.0));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
