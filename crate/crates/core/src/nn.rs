//! Named parameters, layer helpers and the optimizer.
//!
//! Weights are stored with unit-variance initialisation and rescaled at use by
//! `lr_mul / √fan_in` (equalised learning rate), so Adam step sizes are
//! comparable across layers of different width.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LRELU_SLOPE: f64 = 0.2;

/// Gradients keyed by parameter name.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Like [`get`](Self::get) but with a descriptive error.
    pub fn expect(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Binds every tensor as a graph leaf; `trainable(name)` decides which ones get gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = g.leaf(t.clone(), trainable(n));
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn bind_all(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.bind(g, |_| trainable)
    }

    /// Overwrites tensors present in `other`, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in other.iter() {
            let dst = self.get_mut(name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?} does not match {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        Ok(())
    }

    /// Sub-store of the entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    pub fn with_prefix(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(format!("{prefix}{n}"), t.clone());
        }
        out
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        for (n, t) in other.entries {
            self.insert(n, t);
        }
    }
}

/// Graph variables for one binding of a [`ParamStore`].
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients of the bound parameters that received any.
    pub fn collect<T: Scalar>(&self, grads: &Grads<T>) -> GradMap<T> {
        self.vars
            .iter()
            .filter_map(|(n, &v)| grads.get(v).map(|t| (n.clone(), t.clone())))
            .collect()
    }
}

pub fn merge_grads<T: Scalar>(into: &mut GradMap<T>, other: GradMap<T>, scale: T) {
    for (n, t) in other {
        match into.get_mut(&n) {
            Some(acc) => acc.add_assign_scaled(&t, scale),
            None => {
                into.insert(n, t.map(|x| x * scale));
            }
        }
    }
}

/// Seeded initialiser.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }
}

/// Runtime weight scale for equalised learning rate.
pub fn he_gain(shape: &[usize], lr_mul: f64) -> f64 {
    let fan_in: usize = shape[1..].iter().product();
    lr_mul / (fan_in.max(1) as f64).sqrt()
}

/// Adds `{prefix}.weight [out, in]` and `{prefix}.bias [out]`.
pub fn add_dense<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, din: usize, dout: usize, lr_mul: f64, bias_init: f64) {
    store.insert(format!("{prefix}.weight"), init.normal(&[dout, din], 1.0 / lr_mul));
    store.insert(format!("{prefix}.bias"), Tensor::full(&[dout], T::lit(bias_init)));
}

/// Adds `{prefix}.weight [out, in, k, k]` and `{prefix}.bias [out]`.
pub fn add_conv<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) {
    store.insert(format!("{prefix}.weight"), init.normal(&[cout, cin, k, k], 1.0));
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
    }
}

/// Equalised fully connected layer.
pub fn dense<T: Scalar>(g: &mut Graph<T>, b: &Bound, prefix: &str, x: Var, lr_mul: f64) -> Result<Var> {
    let w = b.var(&format!("{prefix}.weight"));
    let gain = he_gain(g.shape(w), lr_mul);
    let ws = g.scale(w, T::lit(gain));
    let bias = b.var(&format!("{prefix}.bias"));
    let bias = if lr_mul == 1.0 { bias } else { g.scale(bias, T::lit(lr_mul)) };
    g.linear(x, ws, Some(bias))
}

/// Equalised convolution with "same" padding for odd kernels.
pub fn conv<T: Scalar>(g: &mut Graph<T>, b: &Bound, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let w = b.var(&format!("{prefix}.weight"));
    let k = g.shape(w)[2];
    let gain = he_gain(g.shape(w), 1.0);
    let ws = g.scale(w, T::lit(gain));
    let bias = b.try_var(&format!("{prefix}.bias"));
    g.conv2d(x, ws, bias, stride, k / 2)
}

/// Leaky ReLU followed by the √2 gain that keeps unit variance.
pub fn lrelu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    let y = g.leaky_relu(x, T::lit(LRELU_SLOPE));
    g.scale(y, T::SQRT_2())
}

/// Adam with bias correction. Parameters without a gradient are left untouched.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, (Tensor<T>, Tensor<T>, u64)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, state: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>) -> Result<()> {
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
            let p = store.get_mut(name).ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown {name}")))?;
            let (m, v, t) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape()), 0));
            *t += 1;
            let c1 = 1.0 - self.beta1.powi(*t as i32);
            let c2 = 1.0 - self.beta2.powi(*t as i32);
            let step = T::lit(self.lr * c2.sqrt() / c1);
            let eps = T::lit(self.eps * c2.sqrt());
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv = *pv - step * *mv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Names of `store` whose name begins with any of `prefixes`.
pub fn names_with_prefixes<T: Scalar>(store: &ParamStore<T>, prefixes: &[String]) -> BTreeSet<String> {
    store.names().filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_str()))).map(str::to_owned).collect()
}

/// Central-difference gradient check over named parameters.
pub mod gradcheck {
    use super::*;

    #[derive(Clone, Debug)]
    pub struct Mismatch {
        pub name: String,
        pub index: usize,
        pub analytic: f64,
        pub numeric: f64,
        pub rel_err: f64,
    }

    /// Relative error with a floor that turns comparisons of near-zero
    /// components into an absolute test.
    pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(floor)
    }

    /// Checks every element (or every `stride`-th element) of the named
    /// tensors. Returns the worst relative error and all components above `tol`.
    #[allow(clippy::too_many_arguments)]
    pub fn check(
        store: &ParamStore<f64>,
        analytic: &GradMap<f64>,
        names: &[String],
        mut loss: impl FnMut(&ParamStore<f64>) -> f64,
        step: f64,
        tol: f64,
        floor: f64,
        stride: usize,
    ) -> (f64, Vec<Mismatch>) {
        let mut worst = 0.0f64;
        let mut bad = Vec::new();
        let mut work = store.clone();
        for name in names {
            let numel = store.get(name).map(|t| t.numel()).unwrap_or(0);
            let zeros = Tensor::zeros(store.get(name).map(|t| t.shape()).unwrap_or(&[0]));
            let a = analytic.get(name).unwrap_or(&zeros);
            for i in (0..numel).step_by(stride.max(1)) {
                let orig = store.get(name).unwrap().data()[i];
                work.get_mut(name).unwrap().data_mut()[i] = orig + step;
                let fp = loss(&work);
                work.get_mut(name).unwrap().data_mut()[i] = orig - step;
                let fm = loss(&work);
                work.get_mut(name).unwrap().data_mut()[i] = orig;
                let numeric = (fp - fm) / (2.0 * step);
                let e = rel_err(a.data()[i], numeric, floor);
                worst = worst.max(e);
                if e > tol {
                    bad.push(Mismatch { name: name.clone(), index: i, analytic: a.data()[i], numeric, rel_err: e });
                }
            }
        }
        (worst, bad)
    }
}
