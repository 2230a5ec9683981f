//! Named learnable tensors, the Adam optimizer, and the checkpoint archive.

use std::io::{Read, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::{read_exact, Real, Tensor};

/// Magic bytes of the named-entry archive.
pub const ARCHIVE_MAGIC: &[u8; 4] = b"NWA1";

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub frozen: bool,
    m: Option<Vec<T>>,
    v: Option<Vec<T>>,
}

impl<T: Real> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        Param { value, grad: None, frozen: false, m: None, v: None }
    }
}

/// Ordered collection of named parameters. Insertion order is the
/// serialization and update order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: IndexMap<String, Param<T>>,
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    /// Binds `name` to an existing graph variable.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Config(format!("parameter {name:?} not bound")))
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, p)| p.value.len()).sum()
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for (k, p) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Adds all parameters to `graph`; frozen ones enter as constants.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| {
                let v = if p.frozen { graph.constant(p.value.clone()) } else { graph.leaf(p.value.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Copies gradients from `graph` into the parameter grad slots. Parameters
    /// the output does not depend on receive zero gradients.
    pub fn collect_grads(&mut self, graph: &Graph<T>, bound: &Bound) {
        for (k, p) in self.entries.iter_mut() {
            if p.frozen {
                p.grad = None;
                continue;
            }
            let g = bound.vars.get(k).and_then(|&v| graph.grad(v)).cloned();
            p.grad = Some(g.unwrap_or_else(|| Tensor::zeros(p.value.shape())));
        }
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Writes every parameter as a named `NWT1` entry.
    pub fn write_archive<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(ARCHIVE_MAGIC)?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, p) in &self.entries {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            p.value.write_to(out)?;
        }
        Ok(())
    }

    pub fn read_archive<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(input, &mut magic, "archive magic")?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Format(format!("bad archive magic {magic:?}")));
        }
        let mut b = [0u8; 4];
        read_exact(input, &mut b, "archive header")?;
        let count = u32::from_le_bytes(b);
        let mut set = ParamSet::new();
        for _ in 0..count {
            read_exact(input, &mut b, "entry name length")?;
            let mut name = vec![0u8; u32::from_le_bytes(b) as usize];
            read_exact(input, &mut name, "entry name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let value = Tensor::read_from(input)?;
            set.insert(name, value);
        }
        Ok(set)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every non-frozen parameter that has a gradient.
    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let step_size = T::c(c.lr / bc1);
        let bc2_sqrt = T::c(bc2.sqrt());
        let eps = T::c(c.eps);
        for p in params.entries.values_mut() {
            if p.frozen {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            let n = p.value.len();
            let m = p.m.get_or_insert_with(|| vec![T::zero(); n]);
            let v = p.v.get_or_insert_with(|| vec![T::zero(); n]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w -= step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}
