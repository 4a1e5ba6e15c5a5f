use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Parameter {
    fn new(value: Tensor, trainable: bool) -> Self {
        let n = value.numel();
        Self {
            value,
            grad: None,
            trainable,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named learnable arrays, kept in name order.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
    step: u64,
}

/// Tape handles for every parameter of a store, created by [`ParameterStore::bind`].
#[derive(Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Parameter::new(value, true));
    }

    /// A parameter that participates in the forward pass but is never updated.
    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Parameter::new(value, false));
    }

    /// Inserts a `fan_in × fan_out`-initialized tensor, uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), p.trainable)))
            .collect();
        BoundParams { vars }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `scale · grads` into each trainable parameter's gradient slot.
    ///
    /// Trainable parameters absent from the tape's gradients (unused in
    /// the forward pass) receive an explicit zero.
    pub fn accumulate(&mut self, bound: &BoundParams, grads: &Gradients, scale: f64) {
        for (name, p) in self.params.iter_mut().filter(|(_, p)| p.trainable) {
            let slot = p
                .grad
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if let Some(g) = bound.vars.get(name).and_then(|&v| grads.get(v)) {
                slot.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += scale * b);
            }
        }
    }

    /// One Adam update of every trainable parameter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self
            .params
            .iter()
            .find(|(_, p)| p.trainable && p.grad.is_none())
        {
            return Err(Error::Contract(format!(
                "parameter `{name}` has no gradient"
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.values_mut().filter(|p| p.trainable) {
            let grad = p.grad.as_ref().expect("checked above");
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(p.first_moment.iter_mut())
                .zip(p.second_moment.iter_mut())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Text checkpoint: one record per parameter, `name rank dims... values...`,
    /// values with 17 significant digits, records in name order.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        for (name, p) in &self.params {
            let shape = p.value.shape();
            write!(out, "{name}  {}", shape.len()).unwrap();
            for d in shape {
                write!(out, " {d}").unwrap();
            }
            out.push(' ');
            for v in p.value.data() {
                write!(out, " {v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses a checkpoint; every parameter is trainable with fresh moments.
    pub fn from_checkpoint_str(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Data {
            path: path.to_path_buf(),
            message: format!("line {}: {message}", line + 1),
        };
        let mut store = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(name) = fields.next() else { continue };
            let rank: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad(lineno, "missing rank".into()))?;
            let shape = (0..rank)
                .map(|_| fields.next().and_then(|f| f.parse::<usize>().ok()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(lineno, "bad dimensions".into()))?;
            let values = fields
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(lineno, e.to_string()))?;
            let value =
                Tensor::new(shape, values).map_err(|e| bad(lineno, e.to_string()))?;
            if store.params.contains_key(name) {
                return Err(bad(lineno, format!("duplicate parameter `{name}`")));
            }
            store.insert(name, value);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text, path)
    }

    /// Copies values from `other` (names and shapes must agree), preserving
    /// this store's trainable flags.
    pub fn load_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        let diffs = self.compatibility_diff(other);
        if !diffs.is_empty() {
            return Err(Error::Compatibility(diffs));
        }
        for (name, p) in &mut self.params {
            p.value = other.params[name].value.clone();
        }
        Ok(())
    }

    /// Names whose presence or shape differs between two stores.
    pub fn compatibility_diff(&self, other: &ParameterStore) -> Vec<String> {
        let mut diffs = Vec::new();
        for (name, p) in &self.params {
            match other.params.get(name) {
                None => diffs.push(format!("{name} (missing from checkpoint)")),
                Some(q) if q.value.shape() != p.value.shape() => diffs.push(format!(
                    "{name} (shape {:?} vs {:?})",
                    p.value.shape(),
                    q.value.shape()
                )),
                _ => {}
            }
        }
        for name in other.params.keys() {
            if !self.params.contains_key(name) {
                diffs.push(format!("{name} (not expected by configuration)"));
            }
        }
        diffs
    }
}
