//! Parameter containers, binding of parameters onto a [`Tape`], seeded
//! initialisation and parameter checksums.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::tape::{Gradients, Tape, Var};

/// Deterministic RNG stream for `(seed, tag, index)`. Streams with different
/// tags or indices are independent, so model initialisation, data shuffling
/// and perturbation noise never share draws.
pub fn derive_rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Affine map `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// LeCun-normal weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: gaussian(out_dim, in_dim, (1.0 / in_dim as f64).sqrt(), rng),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, name: &str, x: Var) -> Var {
        let w = binder.bind(tape, &format!("{name}.weight"), self.weight.view());
        let b = binder.bind_vector(tape, &format!("{name}.bias"), self.bias.view());
        let y = tape.matmul_t(x, w);
        tape.add_row(y, b)
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_matrix(&format!("{name}.weight"), &self.weight, f);
        visit_vector(&format!("{name}.bias"), &self.bias, f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{name}.weight"), as_slice_mut2(&mut self.weight));
        f(&format!("{name}.bias"), as_slice_mut1(&mut self.bias));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormParams {
    pub const EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, name: &str, x: Var) -> Var {
        let g = binder.bind_vector(tape, &format!("{name}.gamma"), self.gamma.view());
        let b = binder.bind_vector(tape, &format!("{name}.beta"), self.beta.view());
        tape.layer_norm(x, g, b, Self::EPS)
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_vector(&format!("{name}.gamma"), &self.gamma, f);
        visit_vector(&format!("{name}.beta"), &self.beta, f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{name}.gamma"), as_slice_mut1(&mut self.gamma));
        f(&format!("{name}.beta"), as_slice_mut1(&mut self.beta));
    }
}

pub(crate) fn visit_matrix(name: &str, m: &Array2<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(name, m.shape(), m.as_slice().expect("standard layout parameter"));
}

pub(crate) fn visit_vector(name: &str, v: &Array1<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(name, v.shape(), v.as_slice().expect("standard layout parameter"));
}

pub(crate) fn as_slice_mut2(m: &mut Array2<f64>) -> &mut [f64] {
    m.as_slice_mut().expect("standard layout parameter")
}

pub(crate) fn as_slice_mut1(v: &mut Array1<f64>) -> &mut [f64] {
    v.as_slice_mut().expect("standard layout parameter")
}

/// Named, ordered view over every parameter of a model-like structure.
pub trait Parameters {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, v| n += v.len());
        n
    }

    /// Flattened copy of all parameters keyed by name.
    fn param_map(&self) -> HashMap<String, Vec<f64>> {
        let mut out = HashMap::new();
        self.visit_params(&mut |name, _, v| {
            out.insert(name.to_string(), v.to_vec());
        });
        out
    }

    /// SHA-256 over parameter names and their little-endian `f64` bytes.
    fn checksum(&self) -> String {
        checksum_filtered(self, |_| true)
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

pub fn checksum_filtered<P: Parameters + ?Sized>(p: &P, mut keep: impl FnMut(&str) -> bool) -> String {
    let mut h = Sha256::new();
    p.visit_params(&mut |name, _, v| {
        if keep(name) {
            h.update(name.as_bytes());
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
    });
    hex::encode(h.finalize())
}

/// Gradients keyed by parameter name, flattened in row-major order.
pub type ParamGrads = HashMap<String, Vec<f64>>;

/// Places parameters on a tape, either as tracked leaves (trainable) or as
/// constants (frozen), and remembers the name of every tracked leaf so that
/// gradients can be routed back after the backward pass.
pub struct Binder {
    trainable: Box<dyn Fn(&str) -> bool>,
    cache: HashMap<String, Var>,
    tracked: Vec<(String, Var)>,
}

impl Binder {
    pub fn trainable() -> Self {
        Self::with_filter(|_| true)
    }

    pub fn frozen() -> Self {
        Self::with_filter(|_| false)
    }

    pub fn with_filter(filter: impl Fn(&str) -> bool + 'static) -> Self {
        Self {
            trainable: Box::new(filter),
            cache: HashMap::new(),
            tracked: Vec::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, value: ArrayView2<f64>) -> Var {
        if let Some(&v) = self.cache.get(name) {
            return v;
        }
        let var = if (self.trainable)(name) {
            let v = tape.param(value.to_owned());
            self.tracked.push((name.to_string(), v));
            v
        } else {
            tape.constant(value.to_owned())
        };
        self.cache.insert(name.to_string(), var);
        var
    }

    /// Binds a vector as a `[1, D]` row.
    pub fn bind_vector(&mut self, tape: &mut Tape, name: &str, value: ArrayView1<f64>) -> Var {
        self.bind(tape, name, value.insert_axis(Axis(0)))
    }

    pub fn bind_scalar(&mut self, tape: &mut Tape, name: &str, value: f64) -> Var {
        let arr = Array2::from_elem((1, 1), value);
        self.bind(tape, name, arr.view())
    }

    pub fn tracked(&self) -> &[(String, Var)] {
        &self.tracked
    }

    /// Collect gradients for every tracked parameter. Parameters that did not
    /// influence the loss get an explicit zero gradient.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> ParamGrads {
        self.tracked
            .iter()
            .map(|(name, var)| {
                let g = match grads.get(*var) {
                    Some(g) => g.iter().copied().collect(),
                    None => vec![0.0; tape.value(*var).len()],
                };
                (name.clone(), g)
            })
            .collect()
    }
}
