//! Named parameter storage, deterministic initialization and the forward
//! context that turns stored tensors into tape leaves.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::NormMode;
use crate::tensor::{BnUpdate, Float, Tape, Tensor, Var};

/// Trainable parameters and non-trainable buffers (norm running statistics),
/// both keyed by dotted names such as `backbone.stage2.ecaconv.conv.weight`.
/// Iteration follows insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    fn check_fresh(&self, name: &str) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::invalid(
                "param_store",
                format!("duplicate name `{name}`"),
            ));
        }
        Ok(())
    }

    pub fn insert_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        self.check_fresh(name)?;
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        self.check_fresh(name)?;
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    /// Scalar count of trainable parameters.
    pub fn num_params(&self) -> u64 {
        self.params.values().map(|t| t.numel() as u64).sum()
    }

    /// Fill a parameter with zeros.
    pub fn zero(&mut self, name: &str) -> Result<()> {
        self.param_mut(name)?.data_mut().fill(T::zero());
        Ok(())
    }

    /// Store running statistics produced by train-mode batch norms.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>) -> Result<()> {
        for u in updates {
            let mean = self.buffer_mut(&format!("{}.running_mean", u.key))?;
            mean.data_mut().copy_from_slice(&u.running_mean);
            let var = self.buffer_mut(&format!("{}.running_var", u.key))?;
            var.data_mut().copy_from_slice(&u.running_var);
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Seeded initializer writing into a [`ParamStore`]. Values are drawn in
/// `f64` and cast, so stores of different precision built from one seed
/// agree up to rounding.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Float> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn param(&mut self, name: &str, value: Tensor<f64>) -> Result<()> {
        self.store.insert_param(name, value.cast())
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<f64>) -> Result<()> {
        self.store.insert_buffer(name, value.cast())
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        let t = if bound > 0.0 {
            Tensor::rand_uniform(shape, -bound, bound, &mut self.rng)
        } else {
            Tensor::zeros(shape)
        };
        self.param(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.param(name, Tensor::full(shape, value))
    }

    /// Overwrite every element of an existing parameter.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        self.store.param_mut(name)?.data_mut().fill(T::c(value));
        Ok(())
    }

    pub fn sample(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }
}

/// Forward-pass context: a tape, the parameters it reads, and the norm mode.
/// Parameters become tape leaves on first use and are cached by name, so a
/// name used twice maps to one leaf.
pub struct Ctx<'a, T: Float> {
    pub tape: &'a mut Tape<T>,
    pub(crate) store: &'a ParamStore<T>,
    mode: NormMode,
    vars: IndexMap<String, Var>,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: NormMode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            vars: IndexMap::new(),
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    /// Use an existing tape node for parameter `name`.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = self.store.param(name)?.clone();
        let v = self.tape.leaf(value, true);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.store.buffer(name)
    }

    /// Parameter leaves created so far, in first-use order.
    pub fn param_vars(&self) -> &IndexMap<String, Var> {
        &self.vars
    }
}

/// One row of a model summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSummary {
    pub name: String,
    pub out_shape: Vec<usize>,
    pub params: u64,
    pub flops: u64,
}

/// Analytic per-layer parameter and FLOP tally. Only convolutions and scans
/// carry FLOPs; norms and activations are free by convention.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Summary {
    pub rows: Vec<LayerSummary>,
}

impl Summary {
    pub fn push(&mut self, name: &str, out_shape: &[usize], params: u64, flops: u64) {
        self.rows.push(LayerSummary {
            name: name.to_string(),
            out_shape: out_shape.to_vec(),
            params,
            flops,
        });
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    /// Sum over rows whose name starts with `prefix`.
    pub fn params_under(&self, prefix: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .map(|r| r.params)
            .sum()
    }

    pub fn flops_under(&self, prefix: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .map(|r| r.flops)
            .sum()
    }

    /// Text report, one tab-separated line per layer plus a total.
    pub fn render(&self) -> String {
        let mut out = String::from("summary v1\nname\tout_shape\tparams\tflops\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:?}\t{}\t{}",
                r.name, r.out_shape, r.params, r.flops
            );
        }
        let _ = writeln!(
            out,
            "total\t-\t{}\t{}",
            self.total_params(),
            self.total_flops()
        );
        out
    }
}
