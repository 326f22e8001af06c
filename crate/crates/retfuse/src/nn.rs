//! Neural-network building blocks over the grad tape.
//!
//! Parameters and buffers live in name-keyed registries owned by the
//! model; a `Forward` context binds them lazily as tape leaves so the same
//! registries drive any number of per-sample tapes. Layer structs hold
//! only names and hyperparameters — all state is in the registries, which
//! keeps checkpointing and optimizer bookkeeping trivial.

use std::collections::HashMap;

use crate::conv::ConvSpec;
use crate::rng;
use crate::tape::{GradTape, NodeId};
use crate::tensor::{Init, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ── Registries ────────────────────────────────────────────────────────

/// Insertion-ordered name → tensor map. Iteration order is construction
/// order, which is deterministic for a given model topology; checkpoint
/// writers sort by name separately.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

/// Trainable parameters.
pub type ParamRegistry = Registry;
/// Non-trainable state (batch-norm running statistics).
pub type BufferRegistry = Registry;

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::Other(format!(
                "registry already contains '{name}'"
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| TensorError::Other(format!("registry has no entry '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(TensorError::Other(format!(
                "registry has no entry '{name}'"
            ))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total scalar count across entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

// ── Forward context ───────────────────────────────────────────────────

/// Per-channel statistics one batch-norm site computed from one sample,
/// in model order; the trainer folds these into running buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    /// Batch-norm site prefix (e.g. `"stage1.block0.bn1"`).
    pub key: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Binds one model (registries + mode) to one tape for one sample.
pub struct Forward<'a> {
    pub tape: &'a mut GradTape,
    params: &'a Registry,
    buffers: &'a Registry,
    pub mode: Mode,
    bound: HashMap<String, NodeId>,
    /// Filled during the forward pass in train mode, in layer order.
    pub bn_stats: Vec<BnStats>,
}

impl<'a> Forward<'a> {
    pub fn new(
        tape: &'a mut GradTape,
        params: &'a ParamRegistry,
        buffers: &'a BufferRegistry,
        mode: Mode,
    ) -> Self {
        Self {
            tape,
            params,
            buffers,
            mode,
            bound: HashMap::new(),
            bn_stats: Vec::new(),
        }
    }

    /// Leaf for a named parameter; bound once per tape, grad-tracked in
    /// train mode.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let mut t = self.params.get(name)?.clone();
        t.set_requires_grad(self.mode == Mode::Train);
        let id = self.tape.leaf(t);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Leaf for input data (never grad-tracked).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        let mut t = t;
        t.set_requires_grad(false);
        self.tape.leaf(t)
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers.get(name)
    }

    /// NodeId each touched parameter was bound to, for gradient readout.
    pub fn bindings(&self) -> &HashMap<String, NodeId> {
        &self.bound
    }
}

// ── Layers ────────────────────────────────────────────────────────────

/// Convolution with optional bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: String,
    pub bias: Option<String>,
    pub spec: ConvSpec,
}

impl ConvLayer {
    /// Registers `[out_ch, in_ch, kernel…]` Kaiming-uniform weights (and
    /// zero bias when requested) under `prefix`, seeded per-name from
    /// `seed`.
    pub fn register(
        params: &mut ParamRegistry,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        spec: ConvSpec,
        with_bias: bool,
        seed: u64,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let mut shape = vec![out_ch, in_ch];
        shape.extend(&spec.kernel);
        params.insert(
            &weight,
            Tensor::create(
                &shape,
                Init::KaimingUniform {
                    seed: rng::stream_id(&[seed, rng::str_tag(&weight)]),
                },
            )?,
        )?;
        let bias = if with_bias {
            let name = format!("{prefix}.bias");
            params.insert(&name, Tensor::zeros(&[out_ch]))?;
            Some(name)
        } else {
            None
        };
        Ok(Self { weight, bias, spec })
    }

    pub fn forward(&self, fwd: &mut Forward, x: NodeId) -> Result<NodeId> {
        self.forward_with_spec(fwd, x, &self.spec)
    }

    /// Forward with an overriding geometry (same kernel, different
    /// stride/pad) — used by downsampling sites whose strides depend on
    /// the runtime spatial extents.
    pub fn forward_with_spec(&self, fwd: &mut Forward, x: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let w = fwd.param(&self.weight)?;
        let b = match &self.bias {
            Some(name) => Some(fwd.param(name)?),
            None => None,
        };
        fwd.tape.conv(x, w, b, spec)
    }
}

/// Per-channel batch normalization backed by running-stat buffers.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    /// Site prefix; also the key reported in `BnStats`.
    pub key: String,
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
}

impl BatchNormLayer {
    pub fn register(
        params: &mut ParamRegistry,
        buffers: &mut BufferRegistry,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        let layer = Self {
            key: prefix.to_string(),
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            running_mean: format!("{prefix}.running_mean"),
            running_var: format!("{prefix}.running_var"),
        };
        params.insert(&layer.gamma, Tensor::create(&[channels], Init::Constant(1.0))?)?;
        params.insert(&layer.beta, Tensor::zeros(&[channels]))?;
        buffers.insert(&layer.running_mean, Tensor::zeros(&[channels]))?;
        buffers.insert(
            &layer.running_var,
            Tensor::create(&[channels], Init::Constant(1.0))?,
        )?;
        Ok(layer)
    }

    pub fn forward(&self, fwd: &mut Forward, x: NodeId) -> Result<NodeId> {
        let gamma = fwd.param(&self.gamma)?;
        let beta = fwd.param(&self.beta)?;
        match fwd.mode {
            Mode::Train => {
                let y = fwd.tape.batch_norm(x, gamma, beta, None)?;
                let (mean, var) = fwd.tape.bn_stats(y).expect("just built a bn node");
                fwd.bn_stats.push(BnStats {
                    key: self.key.clone(),
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                });
                Ok(y)
            }
            Mode::Eval => {
                let rm = fwd.buffer(&self.running_mean)?.data().to_vec();
                let rv = fwd.buffer(&self.running_var)?.data().to_vec();
                fwd.tape.batch_norm(x, gamma, beta, Some((&rm, &rv)))
            }
        }
    }

    /// Fold batch statistics into the running buffers:
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update_running(
        buffers: &mut BufferRegistry,
        key: &str,
        mean: &[f32],
        var: &[f32],
        momentum: f32,
    ) -> Result<()> {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let t = buffers.get_mut(&format!("{key}.{suffix}"))?;
            if t.numel() != batch.len() {
                return Err(TensorError::Other(format!(
                    "running stat '{key}.{suffix}' has {} channels, update has {}",
                    t.numel(),
                    batch.len()
                )));
            }
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        Ok(())
    }
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: String,
    pub bias: String,
}

impl LinearLayer {
    pub fn register(
        params: &mut ParamRegistry,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        seed: u64,
    ) -> Result<Self> {
        let layer = Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
        };
        params.insert(
            &layer.weight,
            Tensor::create(
                &[out_features, in_features],
                Init::KaimingUniform {
                    seed: rng::stream_id(&[seed, rng::str_tag(&layer.weight)]),
                },
            )?,
        )?;
        params.insert(&layer.bias, Tensor::zeros(&[out_features]))?;
        Ok(layer)
    }

    pub fn forward(&self, fwd: &mut Forward, x: NodeId) -> Result<NodeId> {
        let w = fwd.param(&self.weight)?;
        let b = fwd.param(&self.bias)?;
        fwd.tape.linear(x, w, Some(b))
    }
}

// ── Tests ─────────────────────────────────────────────────────────────
