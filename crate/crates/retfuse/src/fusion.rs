//! Fusion strategies over per-modality backbones.
//!
//! Three ways to combine the tri-modal inputs, plus single-modality
//! baselines:
//!
//! * **early** — one 3-channel backbone over the channel-stacked
//!   volumes (the planar modality is broadcast along depth).
//! * **intermediate** — an independent backbone + decision head per
//!   modality; the prediction is the mean of the per-modality sigmoid
//!   probabilities, and training losses are per-modality, so no
//!   gradient crosses modality boundaries.
//! * **hierarchical** — per-modality backbones whose pooled feature
//!   vectors are concatenated into one shared linear head.
//!
//! Every model is a flat list of named parts (backbones and heads),
//! which gives checkpoints, parameter counts, and the trainer a single
//! uniform surface.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{ArchiveError, TensorArchive};
use crate::backbones::{build_backbone, BackboneSpec, ClassifierHead, FeatureExtractor};
use crate::data::Acquisition;
use crate::nn::{BnStats, Forward, Mode};
use crate::rng;
use crate::tape::{GradTape, NodeId};
use crate::tensor::{Tensor, TensorError};

// ── Identifiers ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    Structure,
    Flow,
    Lso,
}

impl ModalityId {
    pub const ALL: [ModalityId; 3] = [ModalityId::Structure, ModalityId::Flow, ModalityId::Lso];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModalityId::Structure => "structure",
            ModalityId::Flow => "flow",
            ModalityId::Lso => "lso",
        }
    }

    /// Spatial rank of this modality's input grid.
    pub fn spatial_rank(&self) -> usize {
        match self {
            ModalityId::Structure | ModalityId::Flow => 3,
            ModalityId::Lso => 2,
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Early,
    Intermediate,
    Hierarchical,
}

impl FusionStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionStrategy::Early => "early",
            FusionStrategy::Intermediate => "intermediate",
            FusionStrategy::Hierarchical => "hierarchical",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a run trains: one modality alone, or a fusion of all three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Single(ModalityId),
    Fusion(FusionStrategy),
}

impl Method {
    pub fn as_string(&self) -> String {
        match self {
            Method::Single(m) => format!("single-{m}"),
            Method::Fusion(s) => s.to_string(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_string())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "early" => Ok(Method::Fusion(FusionStrategy::Early)),
            "intermediate" => Ok(Method::Fusion(FusionStrategy::Intermediate)),
            "hierarchical" => Ok(Method::Fusion(FusionStrategy::Hierarchical)),
            "single-structure" => Ok(Method::Single(ModalityId::Structure)),
            "single-flow" => Ok(Method::Single(ModalityId::Flow)),
            "single-lso" => Ok(Method::Single(ModalityId::Lso)),
            other => Err(format!(
                "unknown method '{other}' (expected early, intermediate, hierarchical, \
                 or single-<structure|flow|lso>)"
            )),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ── Errors ───────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("modality alignment: {0}")]
    Alignment(String),
    #[error("missing modality '{0}' at predict time (no imputation is performed)")]
    MissingModality(ModalityId),
    #[error("operation unsupported for this model: {0}")]
    Unsupported(String),
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

pub type Result<T, E = FusionError> = std::result::Result<T, E>;

// ── Early fusion input ───────────────────────────────────────────────

/// Stack the three modalities into one `[3, D, H, W]` volume in fixed
/// channel order (structure, flow, lso). The planar lso image must
/// match the volumes' `[H, W]` grid and is broadcast along depth.
pub fn fuse_early(structure: &Tensor, flow: &Tensor, lso: &Tensor) -> Result<Tensor> {
    if structure.rank() != 3 || flow.rank() != 3 || lso.rank() != 2 {
        return Err(FusionError::Alignment(format!(
            "expected structure/flow rank 3 and lso rank 2, got {:?} / {:?} / {:?}",
            structure.shape(),
            flow.shape(),
            lso.shape()
        )));
    }
    if structure.shape() != flow.shape() {
        return Err(FusionError::Alignment(format!(
            "structure grid {:?} != flow grid {:?}",
            structure.shape(),
            flow.shape()
        )));
    }
    let (d, h, w) = (structure.shape()[0], structure.shape()[1], structure.shape()[2]);
    if lso.shape() != [h, w] {
        return Err(FusionError::Alignment(format!(
            "lso grid {:?} does not match volume plane [{h}, {w}]; resample first",
            lso.shape()
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(3 * d * plane);
    data.extend_from_slice(structure.data());
    data.extend_from_slice(flow.data());
    for _ in 0..d {
        data.extend_from_slice(lso.data());
    }
    Ok(Tensor::from_vec(vec![3, d, h, w], data)?)
}

/// Per-modality tensors for prediction; absent modalities error rather
/// than being imputed.
#[derive(Debug, Clone, Copy, Default)]
pub struct ModalityInput<'a> {
    pub structure: Option<&'a Tensor>,
    pub flow: Option<&'a Tensor>,
    pub lso: Option<&'a Tensor>,
}

impl<'a> ModalityInput<'a> {
    pub fn from_acquisition(acq: &'a Acquisition) -> Self {
        ModalityInput {
            structure: Some(&acq.structure),
            flow: Some(&acq.flow),
            lso: Some(&acq.lso),
        }
    }

    pub fn get(&self, m: ModalityId) -> Option<&'a Tensor> {
        match m {
            ModalityId::Structure => self.structure,
            ModalityId::Flow => self.flow,
            ModalityId::Lso => self.lso,
        }
    }

    fn required(&self, m: ModalityId) -> Result<&'a Tensor> {
        self.get(m).ok_or(FusionError::MissingModality(m))
    }
}

// ── Model parts ──────────────────────────────────────────────────────

#[derive(Debug)]
pub enum PartKind {
    Backbone(FeatureExtractor),
    Head(ClassifierHead),
}

/// One named component of a fusion model.
#[derive(Debug)]
pub struct ModelPart {
    pub name: String,
    pub kind: PartKind,
}

impl ModelPart {
    pub fn params(&self) -> &crate::nn::ParamRegistry {
        match &self.kind {
            PartKind::Backbone(b) => &b.params,
            PartKind::Head(h) => &h.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut crate::nn::ParamRegistry {
        match &mut self.kind {
            PartKind::Backbone(b) => &mut b.params,
            PartKind::Head(h) => &mut h.params,
        }
    }

    pub fn buffers(&self) -> &crate::nn::BufferRegistry {
        match &self.kind {
            PartKind::Backbone(b) => &b.buffers,
            PartKind::Head(h) => &h.buffers,
        }
    }

    pub fn buffers_mut(&mut self) -> &mut crate::nn::BufferRegistry {
        match &mut self.kind {
            PartKind::Backbone(b) => &mut b.buffers,
            PartKind::Head(h) => &mut h.buffers,
        }
    }

    pub fn as_backbone(&self) -> Option<&FeatureExtractor> {
        match &self.kind {
            PartKind::Backbone(b) => Some(b),
            PartKind::Head(_) => None,
        }
    }

    pub fn as_head(&self) -> Option<&ClassifierHead> {
        match &self.kind {
            PartKind::Backbone(_) => None,
            PartKind::Head(h) => Some(h),
        }
    }
}

// ── Gradient payloads ────────────────────────────────────────────────

/// Per-part gradient contribution of one training sample.
#[derive(Debug)]
pub struct PartGrads {
    /// Parameter name → gradient, aligned with the part's registry.
    pub grads: HashMap<String, Vec<f32>>,
    /// Batch-norm per-channel stats observed during the forward pass.
    pub bn: Vec<BnStats>,
}

/// Loss and gradients from one sample's tape.
#[derive(Debug)]
pub struct SampleBackprop {
    pub loss: f64,
    /// One entry per model part, in `parts()` order.
    pub parts: Vec<PartGrads>,
}

// ── The model ────────────────────────────────────────────────────────

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub struct FusionModel {
    method: Method,
    preset: String,
    parts: Vec<ModelPart>,
}

fn part_seed(seed: u64, part_name: &str) -> u64 {
    rng::stream_id(&[seed, rng::str_tag(part_name)])
}

fn backbone_part(
    name: &str,
    preset: &str,
    spatial_rank: usize,
    in_channels: usize,
    seed: u64,
) -> Result<ModelPart> {
    let spec = BackboneSpec::preset(preset, spatial_rank)?;
    let fe = build_backbone(&spec, in_channels, part_seed(seed, name))?;
    Ok(ModelPart {
        name: name.to_string(),
        kind: PartKind::Backbone(fe),
    })
}

fn head_part(name: &str, in_features: usize, seed: u64) -> Result<ModelPart> {
    let head = ClassifierHead::new(in_features, part_seed(seed, name))?;
    Ok(ModelPart {
        name: name.to_string(),
        kind: PartKind::Head(head),
    })
}

/// Build a model for any method. Single-modality and early fusion use
/// one backbone + one head; intermediate uses a backbone and head per
/// modality; hierarchical shares one head over concatenated features.
pub fn build_model(method: Method, preset: &str, seed: u64) -> Result<FusionModel> {
    let mut parts = Vec::new();
    match method {
        Method::Single(m) => {
            let bb = backbone_part("backbone", preset, m.spatial_rank(), 1, seed)?;
            let dim = bb.as_backbone().unwrap().feature_dim;
            parts.push(bb);
            parts.push(head_part("head", dim, seed)?);
        }
        Method::Fusion(FusionStrategy::Early) => {
            let bb = backbone_part("backbone", preset, 3, 3, seed)?;
            let dim = bb.as_backbone().unwrap().feature_dim;
            parts.push(bb);
            parts.push(head_part("head", dim, seed)?);
        }
        Method::Fusion(FusionStrategy::Intermediate) => {
            let mut dims = Vec::new();
            for m in ModalityId::ALL {
                let name = format!("backbone.{m}");
                let bb = backbone_part(&name, preset, m.spatial_rank(), 1, seed)?;
                dims.push(bb.as_backbone().unwrap().feature_dim);
                parts.push(bb);
            }
            for (m, dim) in ModalityId::ALL.iter().zip(dims) {
                parts.push(head_part(&format!("head.{m}"), dim, seed)?);
            }
        }
        Method::Fusion(FusionStrategy::Hierarchical) => {
            let mut total = 0;
            for m in ModalityId::ALL {
                let name = format!("backbone.{m}");
                let bb = backbone_part(&name, preset, m.spatial_rank(), 1, seed)?;
                total += bb.as_backbone().unwrap().feature_dim;
                parts.push(bb);
            }
            parts.push(head_part("head", total, seed)?);
        }
    }
    Ok(FusionModel {
        method,
        preset: preset.to_string(),
        parts,
    })
}

/// Build a fusion model (the three paper strategies).
pub fn build_fusion_model(strategy: FusionStrategy, preset: &str, seed: u64) -> Result<FusionModel> {
    build_model(Method::Fusion(strategy), preset, seed)
}

/// Build a single-modality baseline model.
pub fn build_single_modality_model(
    modality: ModalityId,
    preset: &str,
    seed: u64,
) -> Result<FusionModel> {
    build_model(Method::Single(modality), preset, seed)
}

/// Add the leading channel axis expected by backbones.
fn with_channel(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(t.reshaped(shape)?)
}

impl FusionModel {
    pub fn method(&self) -> Method {
        self.method
    }

    pub fn strategy(&self) -> Option<FusionStrategy> {
        match self.method {
            Method::Fusion(s) => Some(s),
            Method::Single(_) => None,
        }
    }

    pub fn preset(&self) -> &str {
        &self.preset
    }

    pub fn parts(&self) -> &[ModelPart] {
        &self.parts
    }

    pub fn parts_mut(&mut self) -> &mut [ModelPart] {
        &mut self.parts
    }

    pub fn part(&self, name: &str) -> Result<&ModelPart> {
        self.parts
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| FusionError::Unsupported(format!("no part named '{name}'")))
    }

    pub fn param_count(&self) -> usize {
        self.parts.iter().map(|p| p.params().numel()).sum()
    }

    // ── Forward internals ────────────────────────────────────────────

    /// Run the backbone in part `idx` on input `x` (`[C, sp..]`).
    fn run_backbone(
        &self,
        tape: &mut GradTape,
        idx: usize,
        x: Tensor,
        mode: Mode,
    ) -> Result<(NodeId, PartRun)> {
        let fe = self.parts[idx]
            .as_backbone()
            .expect("part layout: backbone expected");
        let mut fwd = Forward::new(tape, &fe.params, &fe.buffers, mode);
        let xid = fwd.input(x);
        let f = fe.forward_sample(&mut fwd, xid)?;
        let run = PartRun {
            bindings: fwd.bindings().clone(),
            bn: std::mem::take(&mut fwd.bn_stats),
        };
        Ok((f, run))
    }

    /// Run the head in part `idx` on feature node `f` → logit node.
    fn run_head(
        &self,
        tape: &mut GradTape,
        idx: usize,
        f: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, PartRun)> {
        let head = self.parts[idx].as_head().expect("part layout: head expected");
        let mut fwd = Forward::new(tape, &head.params, &head.buffers, mode);
        let logit = head.forward_sample(&mut fwd, f)?;
        let run = PartRun {
            bindings: fwd.bindings().clone(),
            bn: std::mem::take(&mut fwd.bn_stats),
        };
        Ok((logit, run))
    }

    /// Build the whole per-sample graph. Returns the probability
    /// node(s) and one `PartRun` per part, in `parts()` order.
    fn forward_graph(
        &self,
        tape: &mut GradTape,
        input: &ModalityInput,
        mode: Mode,
    ) -> Result<(ForwardOut, Vec<PartRun>)> {
        match self.method {
            Method::Single(m) => {
                let x = with_channel(input.required(m)?)?;
                let (f, run_bb) = self.run_backbone(tape, 0, x, mode)?;
                let (logit, run_head) = self.run_head(tape, 1, f, mode)?;
                let p = tape.sigmoid(logit)?;
                Ok((ForwardOut::Prob(p), vec![run_bb, run_head]))
            }
            Method::Fusion(FusionStrategy::Early) => {
                let x = fuse_early(
                    input.required(ModalityId::Structure)?,
                    input.required(ModalityId::Flow)?,
                    input.required(ModalityId::Lso)?,
                )?;
                let (f, run_bb) = self.run_backbone(tape, 0, x, mode)?;
                let (logit, run_head) = self.run_head(tape, 1, f, mode)?;
                let p = tape.sigmoid(logit)?;
                Ok((ForwardOut::Prob(p), vec![run_bb, run_head]))
            }
            Method::Fusion(FusionStrategy::Intermediate) => {
                let mut probs = Vec::new();
                let mut bb_runs = Vec::new();
                let mut head_runs = Vec::new();
                for (i, m) in ModalityId::ALL.iter().enumerate() {
                    let x = with_channel(input.required(*m)?)?;
                    let (f, run_bb) = self.run_backbone(tape, i, x, mode)?;
                    let (logit, run_head) = self.run_head(tape, 3 + i, f, mode)?;
                    probs.push(tape.sigmoid(logit)?);
                    bb_runs.push(run_bb);
                    head_runs.push(run_head);
                }
                bb_runs.extend(head_runs);
                Ok((ForwardOut::Probs(probs), bb_runs))
            }
            Method::Fusion(FusionStrategy::Hierarchical) => {
                let mut feats = Vec::new();
                let mut runs = Vec::new();
                for (i, m) in ModalityId::ALL.iter().enumerate() {
                    let x = with_channel(input.required(*m)?)?;
                    let (f, run_bb) = self.run_backbone(tape, i, x, mode)?;
                    feats.push(f);
                    runs.push(run_bb);
                }
                let fused = tape.concat(0, &feats)?;
                let (logit, run_head) = self.run_head(tape, 3, fused, mode)?;
                runs.push(run_head);
                let p = tape.sigmoid(logit)?;
                Ok((ForwardOut::Prob(p), runs))
            }
        }
    }

    // ── Prediction ───────────────────────────────────────────────────

    /// Probability of the positive class for one acquisition, in eval
    /// mode (batch-norm uses running statistics; nothing is mutated).
    pub fn predict(&self, acq: &Acquisition) -> Result<f64> {
        self.predict_input(&ModalityInput::from_acquisition(acq))
    }

    /// Prediction from explicit per-modality tensors. A modality the
    /// model needs but the input lacks is an error.
    pub fn predict_input(&self, input: &ModalityInput) -> Result<f64> {
        let mut tape = GradTape::new();
        let (out, _) = self.forward_graph(&mut tape, input, Mode::Eval)?;
        match out {
            ForwardOut::Prob(p) => Ok(tape.value(p).item()? as f64),
            ForwardOut::Probs(ps) => {
                let mut sum = 0.0f64;
                for p in &ps {
                    sum += tape.value(*p).item()? as f64;
                }
                Ok(sum / ps.len() as f64)
            }
        }
    }

    /// Predictions for a whole set, in input order.
    pub fn predict_batch(&self, acqs: &[Acquisition]) -> Result<Vec<f64>> {
        acqs.iter().map(|a| self.predict(a)).collect()
    }

    // ── Training step ────────────────────────────────────────────────

    /// Forward + backward for one sample in train mode. Returns the
    /// loss, per-part parameter gradients, and per-part batch-norm
    /// statistics; the model itself is not mutated.
    ///
    /// Intermediate fusion optimizes the mean of the three per-modality
    /// losses, so each modality tower receives gradients only from its
    /// own prediction.
    pub fn train_sample(&self, acq: &Acquisition, pos_weight: f32) -> Result<SampleBackprop> {
        let target = acq.label_f32();
        let mut tape = GradTape::new();
        let input = ModalityInput::from_acquisition(acq);
        let (out, runs) = self.forward_graph(&mut tape, &input, Mode::Train)?;
        let loss = match out {
            ForwardOut::Prob(p) => tape.bce_loss(p, target, pos_weight)?,
            ForwardOut::Probs(ps) => {
                let mut acc: Option<NodeId> = None;
                let n = ps.len();
                for p in ps {
                    let l = tape.bce_loss(p, target, pos_weight)?;
                    acc = Some(match acc {
                        None => l,
                        Some(a) => tape.add(a, l)?,
                    });
                }
                tape.scale(acc.expect("at least one modality"), 1.0 / n as f32)?
            }
        };
        let loss_value = tape.value(loss).item()? as f64;
        let grads = tape.backward(loss)?;

        let mut parts_out = Vec::with_capacity(runs.len());
        for (part, run) in self.parts.iter().zip(runs) {
            let mut map = HashMap::new();
            for (name, id) in &run.bindings {
                let g = match grads.get(*id) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; part.params().get(name)?.numel()],
                };
                map.insert(name.clone(), g);
            }
            parts_out.push(PartGrads {
                grads: map,
                bn: run.bn,
            });
        }
        Ok(SampleBackprop {
            loss: loss_value,
            parts: parts_out,
        })
    }

    /// Train-mode loss for one sample without the backward pass; the
    /// finite-difference gradient checker leans on this.
    pub fn train_loss(&self, acq: &Acquisition, pos_weight: f32) -> Result<f64> {
        let target = acq.label_f32();
        let mut tape = GradTape::new();
        let input = ModalityInput::from_acquisition(acq);
        let (out, _) = self.forward_graph(&mut tape, &input, Mode::Train)?;
        let loss = match out {
            ForwardOut::Prob(p) => tape.bce_loss(p, target, pos_weight)?,
            ForwardOut::Probs(ps) => {
                let mut acc: Option<NodeId> = None;
                let n = ps.len();
                for p in ps {
                    let l = tape.bce_loss(p, target, pos_weight)?;
                    acc = Some(match acc {
                        None => l,
                        Some(a) => tape.add(a, l)?,
                    });
                }
                tape.scale(acc.expect("at least one modality"), 1.0 / n as f32)?
            }
        };
        Ok(tape.value(loss).item()? as f64)
    }

    // ── Feature access ───────────────────────────────────────────────

    /// Pooled feature vector per modality (eval mode). Available for
    /// models with per-modality backbones.
    pub fn pooled_features(&self, input: &ModalityInput) -> Result<Vec<(ModalityId, Vec<f32>)>> {
        match self.method {
            Method::Fusion(FusionStrategy::Intermediate)
            | Method::Fusion(FusionStrategy::Hierarchical) => {
                let mut out = Vec::new();
                for (i, m) in ModalityId::ALL.iter().enumerate() {
                    let mut tape = GradTape::new();
                    let x = with_channel(input.required(*m)?)?;
                    let (f, _) = self.run_backbone(&mut tape, i, x, Mode::Eval)?;
                    out.push((*m, tape.value(f).data().to_vec()));
                }
                Ok(out)
            }
            _ => Err(FusionError::Unsupported(
                "pooled per-modality features require per-modality backbones".into(),
            )),
        }
    }

    /// Evaluate the shared/single decision head on an explicit feature
    /// vector. Unavailable for intermediate fusion (three heads).
    pub fn head_logit_from_features(&self, features: &[f32]) -> Result<f64> {
        let idx = match self.method {
            Method::Single(_) | Method::Fusion(FusionStrategy::Early) => 1,
            Method::Fusion(FusionStrategy::Hierarchical) => 3,
            Method::Fusion(FusionStrategy::Intermediate) => {
                return Err(FusionError::Unsupported(
                    "intermediate fusion has one head per modality".into(),
                ))
            }
        };
        let head = self.parts[idx].as_head().expect("part layout: head expected");
        if features.len() != head.in_features {
            return Err(FusionError::Alignment(format!(
                "feature vector length {} != head input {}",
                features.len(),
                head.in_features
            )));
        }
        let mut tape = GradTape::new();
        let f = Tensor::from_vec(vec![features.len()], features.to_vec())?;
        let (logit, _) = {
            let mut fwd = Forward::new(&mut tape, &head.params, &head.buffers, Mode::Eval);
            let fid = fwd.input(f);
            let logit = head.forward_sample(&mut fwd, fid)?;
            (logit, ())
        };
        Ok(tape.value(logit).item()? as f64)
    }

    // ── State snapshot / restore ─────────────────────────────────────

    /// Flat copy of all parameters and buffers, for best-epoch restore.
    pub fn snapshot(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for part in &self.parts {
            for (name, t) in part.params().iter() {
                out.push((format!("p/{}/{name}", part.name), t.data().to_vec()));
            }
            for (name, t) in part.buffers().iter() {
                out.push((format!("b/{}/{name}", part.name), t.data().to_vec()));
            }
        }
        out
    }

    /// Restore a snapshot taken from an identically shaped model.
    pub fn restore(&mut self, snapshot: &[(String, Vec<f32>)]) -> Result<()> {
        let mut by_key: HashMap<&str, &[f32]> = HashMap::new();
        for (k, v) in snapshot {
            by_key.insert(k.as_str(), v.as_slice());
        }
        for part in &mut self.parts {
            let part_name = part.name.clone();
            for kind in ["p", "b"] {
                let reg = if kind == "p" { part.params_mut() } else { part.buffers_mut() };
                let names: Vec<String> = reg.names().map(str::to_string).collect();
                for name in names {
                    let key = format!("{kind}/{part_name}/{name}");
                    let src = by_key.remove(key.as_str()).ok_or_else(|| {
                        FusionError::BadCheckpoint(format!("snapshot missing entry '{key}'"))
                    })?;
                    let dst = reg.get_mut(&name)?;
                    if src.len() != dst.numel() {
                        return Err(FusionError::BadCheckpoint(format!(
                            "snapshot entry '{key}' has {} values, expected {}",
                            src.len(),
                            dst.numel()
                        )));
                    }
                    dst.data_mut().copy_from_slice(src);
                }
            }
        }
        if let Some((k, _)) = by_key.iter().next() {
            return Err(FusionError::BadCheckpoint(format!(
                "snapshot entry '{k}' does not correspond to any model state"
            )));
        }
        Ok(())
    }

    // ── Checkpoints ──────────────────────────────────────────────────

    /// Serialize the model (method, preset, every parameter and
    /// buffer) into an archive. `extra_meta` lets the trainer record
    /// epoch and validation metrics alongside.
    pub fn to_archive(&self, extra_meta: &[(String, String)]) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.insert_meta("checkpoint-version", &CHECKPOINT_VERSION.to_string());
        a.insert_meta("method", &self.method.as_string());
        a.insert_meta("preset", &self.preset);
        for (k, v) in extra_meta {
            a.insert_meta(k, v);
        }
        for part in &self.parts {
            for (name, t) in part.params().iter() {
                a.insert_tensor(&format!("p/{}/{name}", part.name), t.clone());
            }
            for (name, t) in part.buffers().iter() {
                a.insert_tensor(&format!("b/{}/{name}", part.name), t.clone());
            }
        }
        a
    }

    /// Rebuild a model from an archive produced by `to_archive`.
    pub fn from_archive(archive: &TensorArchive) -> Result<FusionModel> {
        let version = archive.meta_value("checkpoint-version")?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(FusionError::BadCheckpoint(format!(
                "unsupported checkpoint version '{version}' (supported: {CHECKPOINT_VERSION})"
            )));
        }
        let method: Method = archive
            .meta_value("method")?
            .parse()
            .map_err(FusionError::BadCheckpoint)?;
        let preset = archive.meta_value("preset")?.to_string();
        let mut model = build_model(method, &preset, 0)?;

        let mut expected: Vec<String> = Vec::new();
        for part in &mut model.parts {
            let part_name = part.name.clone();
            for kind in ["p", "b"] {
                let reg = if kind == "p" { part.params_mut() } else { part.buffers_mut() };
                let names: Vec<String> = reg.names().map(str::to_string).collect();
                for name in names {
                    let key = format!("{kind}/{part_name}/{name}");
                    let src = archive.tensor(&key).map_err(|_| {
                        FusionError::BadCheckpoint(format!("checkpoint missing tensor '{key}'"))
                    })?;
                    let dst = reg.get_mut(&name)?;
                    if src.shape() != dst.shape() {
                        return Err(FusionError::BadCheckpoint(format!(
                            "checkpoint tensor '{key}' has shape {:?}, expected {:?}",
                            src.shape(),
                            dst.shape()
                        )));
                    }
                    dst.data_mut().copy_from_slice(src.data());
                    expected.push(key);
                }
            }
        }
        if archive.tensors.len() != expected.len() {
            let known: std::collections::HashSet<_> = expected.iter().collect();
            let stray = archive
                .tensors
                .keys()
                .find(|k| !known.contains(k))
                .cloned()
                .unwrap_or_default();
            return Err(FusionError::BadCheckpoint(format!(
                "checkpoint tensor '{stray}' does not correspond to any model state"
            )));
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path, extra_meta: &[(String, String)]) -> Result<()> {
        Ok(self.to_archive(extra_meta).save(path)?)
    }

    pub fn load_checkpoint(path: &Path) -> Result<FusionModel> {
        let archive = TensorArchive::load(path)?;
        Self::from_archive(&archive)
    }
}

/// Probability node(s) produced by a forward pass.
enum ForwardOut {
    Prob(NodeId),
    /// Per-modality probabilities in `ModalityId::ALL` order.
    Probs(Vec<NodeId>),
}

/// Bindings and batch-norm stats from one part's forward pass.
struct PartRun {
    bindings: HashMap<String, NodeId>,
    bn: Vec<BnStats>,
}

// ── Tests ────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    const VOL: [usize; 3] = [8, 24, 24];
    const PLANE: [usize; 2] = [24, 24];

    fn test_acq(seed: u64, grade: u8) -> Acquisition {
        let u = |s: u64, shape: &[usize]| {
            Tensor::create(shape, Init::Uniform { seed: s, lo: 0.0, hi: 1.0 }).unwrap()
        };
        Acquisition {
            acquisition_id: format!("t{seed}"),
            patient_id: "p0".into(),
            icdr_grade: grade,
            structure: u(seed * 10 + 1, &VOL),
            flow: u(seed * 10 + 2, &VOL),
            lso: u(seed * 10 + 3, &PLANE),
        }
    }

    fn logit(p: f32) -> f32 {
        (p / (1.0 - p)).ln()
    }

    fn zero_params_with_bias(model: &mut FusionModel, part_name: &str, bias: f32) {
        let part = model
            .parts_mut()
            .iter_mut()
            .find(|p| p.name == part_name)
            .unwrap();
        let names: Vec<String> = part.params().names().map(str::to_string).collect();
        for name in names {
            let t = part.params_mut().get_mut(&name).unwrap();
            let fill = if name.ends_with(".bias") { bias } else { 0.0 };
            for v in t.data_mut() {
                *v = fill;
            }
        }
    }

    #[test]
    fn fuse_early_channel_order_and_broadcast() {
        let s = Tensor::from_vec(vec![2, 2, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let f = Tensor::from_vec(vec![2, 2, 2], (0..8).map(|i| 10.0 + i as f32).collect()).unwrap();
        let l = Tensor::from_vec(vec![2, 2], vec![20.0, 21.0, 22.0, 23.0]).unwrap();
        let fused = fuse_early(&s, &f, &l).unwrap();
        assert_eq!(fused.shape(), &[3, 2, 2, 2]);
        // Channel 0: structure, channel 1: flow.
        assert_eq!(&fused.data()[0..8], s.data());
        assert_eq!(&fused.data()[8..16], f.data());
        // Channel 2: lso repeated along depth.
        assert_eq!(&fused.data()[16..20], l.data());
        assert_eq!(&fused.data()[20..24], l.data());
    }

    #[test]
    fn fuse_early_rejects_misaligned_grids() {
        let s = Tensor::zeros(&[2, 4, 4]);
        let f = Tensor::zeros(&[2, 4, 4]);
        let l_bad = Tensor::zeros(&[5, 4]);
        assert!(matches!(
            fuse_early(&s, &f, &l_bad),
            Err(FusionError::Alignment(_))
        ));
        let f_bad = Tensor::zeros(&[3, 4, 4]);
        let l = Tensor::zeros(&[4, 4]);
        assert!(matches!(
            fuse_early(&s, &f_bad, &l),
            Err(FusionError::Alignment(_))
        ));
        let s2 = Tensor::zeros(&[4, 4]);
        assert!(fuse_early(&s2, &f, &l).is_err());
    }

    #[test]
    fn part_layouts_per_method() {
        let single = build_single_modality_model(ModalityId::Structure, "mini-res-a", 1).unwrap();
        let names: Vec<_> = single.parts().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["backbone", "head"]);

        let early = build_fusion_model(FusionStrategy::Early, "mini-res-a", 1).unwrap();
        assert_eq!(early.parts()[0].as_backbone().unwrap().in_channels, 3);

        let inter = build_fusion_model(FusionStrategy::Intermediate, "mini-res-a", 1).unwrap();
        let names: Vec<_> = inter.parts().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "backbone.structure",
                "backbone.flow",
                "backbone.lso",
                "head.structure",
                "head.flow",
                "head.lso"
            ]
        );

        let hier = build_fusion_model(FusionStrategy::Hierarchical, "mini-res-a", 1).unwrap();
        let names: Vec<_> = hier.parts().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            ["backbone.structure", "backbone.flow", "backbone.lso", "head"]
        );
        let dims: usize = hier.parts()[..3]
            .iter()
            .map(|p| p.as_backbone().unwrap().feature_dim)
            .sum();
        assert_eq!(hier.parts()[3].as_head().unwrap().in_features, dims);
    }

    #[test]
    fn intermediate_parameter_count_relation() {
        // Three towers: two volumetric backbones, one planar backbone,
        // three heads. The total must equal the sum computed from the
        // corresponding single-modality models.
        let inter = build_fusion_model(FusionStrategy::Intermediate, "mini-res-a", 5).unwrap();
        let s3 = build_single_modality_model(ModalityId::Structure, "mini-res-a", 5).unwrap();
        let s2 = build_single_modality_model(ModalityId::Lso, "mini-res-a", 5).unwrap();
        let bb3 = s3.parts()[0].params().numel();
        let bb2 = s2.parts()[0].params().numel();
        let head3 = s3.parts()[1].params().numel();
        let head2 = s2.parts()[1].params().numel();
        assert_eq!(inter.param_count(), 2 * bb3 + bb2 + 2 * head3 + head2);
        // Same-rank towers are exactly one single-modality model each.
        assert_eq!(
            inter.parts()[0].params().numel() + inter.parts()[3].params().numel(),
            s3.param_count()
        );
    }

    #[test]
    fn builds_are_deterministic_and_towers_differ() {
        let a = build_fusion_model(FusionStrategy::Hierarchical, "mini-res-a", 7).unwrap();
        let b = build_fusion_model(FusionStrategy::Hierarchical, "mini-res-a", 7).unwrap();
        for (pa, pb) in a.parts().iter().zip(b.parts()) {
            for ((na, ta), (nb, tb)) in pa.params().iter().zip(pb.params().iter()) {
                assert_eq!(na, nb);
                assert_eq!(ta.data(), tb.data());
            }
        }
        // Different seeds change weights; different towers differ too.
        let c = build_fusion_model(FusionStrategy::Hierarchical, "mini-res-a", 8).unwrap();
        let first = |m: &FusionModel, part: usize| {
            m.parts()[part].params().iter().next().map(|(_, t)| t.data().to_vec()).unwrap()
        };
        assert!(first(&a, 0) != first(&c, 0));
        assert!(first(&a, 0) != first(&a, 1), "structure and flow towers share init");
    }

    #[test]
    fn zero_heads_predict_exactly_half() {
        let acq = test_acq(1, 0);
        for strategy in [FusionStrategy::Intermediate, FusionStrategy::Hierarchical] {
            let mut model = build_fusion_model(strategy, "mini-res-a", 3).unwrap();
            let head_names: Vec<String> = model
                .parts()
                .iter()
                .filter(|p| p.as_head().is_some())
                .map(|p| p.name.clone())
                .collect();
            for name in head_names {
                zero_params_with_bias(&mut model, &name, 0.0);
            }
            let p = model.predict(&acq).unwrap();
            assert_eq!(p, 0.5, "{strategy} with zero heads must output exactly 0.5");
        }
    }

    #[test]
    fn intermediate_prediction_is_mean_of_probs() {
        let acq = test_acq(2, 4);
        let mut model = build_fusion_model(FusionStrategy::Intermediate, "mini-res-a", 3).unwrap();
        for (name, p) in [
            ("head.structure", 0.2f32),
            ("head.flow", 0.4),
            ("head.lso", 0.6),
        ] {
            zero_params_with_bias(&mut model, name, logit(p));
        }
        let p = model.predict(&acq).unwrap();
        assert!((p - 0.4).abs() < 1e-6, "mean of 0.2/0.4/0.6 should be 0.4, got {p}");
    }

    #[test]
    fn missing_modality_is_an_error() {
        let acq = test_acq(3, 0);
        let inter = build_fusion_model(FusionStrategy::Intermediate, "mini-res-a", 3).unwrap();
        let input = ModalityInput {
            structure: Some(&acq.structure),
            flow: None,
            lso: Some(&acq.lso),
        };
        assert!(matches!(
            inter.predict_input(&input),
            Err(FusionError::MissingModality(ModalityId::Flow))
        ));
        // A single-modality model only needs its own modality.
        let single = build_single_modality_model(ModalityId::Structure, "mini-res-a", 3).unwrap();
        assert!(single.predict_input(&input).is_ok());
    }

    #[test]
    fn hierarchical_head_is_linear_in_flow_slice() {
        let model = build_fusion_model(FusionStrategy::Hierarchical, "mini-res-a", 11).unwrap();
        let dim_s = model.parts()[0].as_backbone().unwrap().feature_dim;
        let dim_f = model.parts()[1].as_backbone().unwrap().feature_dim;
        let total = model.parts()[3].as_head().unwrap().in_features;
        let base: Vec<f32> = (0..total).map(|i| (i as f32 * 0.37).sin() * 0.5).collect();
        let mut delta = vec![0.0f32; total];
        for (i, d) in delta.iter_mut().enumerate().skip(dim_s).take(dim_f) {
            *d = ((i as f32) * 0.11).cos() * 0.3;
        }
        let eval = |alpha: f32| {
            let v: Vec<f32> = base.iter().zip(&delta).map(|(b, d)| b + alpha * d).collect();
            model.head_logit_from_features(&v).unwrap()
        };
        let l0 = eval(0.0);
        let l1 = eval(1.0);
        let l2 = eval(2.0);
        assert!(
            ((l2 - l1) - (l1 - l0)).abs() < 1e-5,
            "logit must be linear along the flow slice: {l0} {l1} {l2}"
        );
    }

    #[test]
    fn intermediate_towers_are_gradient_independent() {
        let model = build_fusion_model(FusionStrategy::Intermediate, "mini-res-a", 13).unwrap();
        let acq_a = test_acq(4, 4);
        let mut acq_b = acq_a.clone();
        // Perturb only the flow volume.
        acq_b.flow = Tensor::create(&VOL, Init::Uniform { seed: 999, lo: 0.0, hi: 1.0 }).unwrap();

        let ga = model.train_sample(&acq_a, 1.0).unwrap();
        let gb = model.train_sample(&acq_b, 1.0).unwrap();

        // Structure tower (part 0) and its head (part 3): identical bits.
        for idx in [0usize, 3, 2, 5] {
            let pa = &ga.parts[idx].grads;
            let pb = &gb.parts[idx].grads;
            assert_eq!(pa.len(), pb.len());
            for (name, va) in pa {
                let vb = &pb[name];
                let bits_a: Vec<u32> = va.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = vb.iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b, "part {idx} '{name}' changed with flow input");
            }
        }
        // Flow tower must actually see the change.
        let flow_changed = ga.parts[1]
            .grads
            .iter()
            .any(|(name, va)| va != &gb.parts[1].grads[name]);
        assert!(flow_changed, "flow tower gradients should differ");
    }

    #[test]
    fn train_sample_reports_loss_and_full_coverage() {
        let model = build_fusion_model(FusionStrategy::Hierarchical, "mini-res-a", 17).unwrap();
        let bp = model.train_sample(&test_acq(6, 4), 1.0).unwrap();
        assert!(bp.loss.is_finite() && bp.loss > 0.0);
        assert_eq!(bp.parts.len(), model.parts().len());
        for (part, pg) in model.parts().iter().zip(&bp.parts) {
            assert_eq!(
                pg.grads.len(),
                part.params().len(),
                "part '{}' missing parameter gradients",
                part.name
            );
            let nonzero = pg
                .grads
                .values()
                .any(|g| g.iter().any(|&v| v != 0.0));
            assert!(nonzero, "part '{}' received no gradient signal", part.name);
        }
        // Backbone parts report batch-norm stats in train mode.
        assert!(!bp.parts[0].bn.is_empty());
        assert!(bp.parts[3].bn.is_empty(), "heads have no batch norm");
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact_for_all_methods() {
        let dir = tempfile::tempdir().unwrap();
        let acq = test_acq(8, 0);
        for (i, method) in [
            Method::Single(ModalityId::Flow),
            Method::Fusion(FusionStrategy::Early),
            Method::Fusion(FusionStrategy::Intermediate),
            Method::Fusion(FusionStrategy::Hierarchical),
        ]
        .into_iter()
        .enumerate()
        {
            let model = build_model(method, "mini-res-a", 21 + i as u64).unwrap();
            let path = dir.path().join(format!("m{i}.farc"));
            model
                .save_checkpoint(&path, &[("epoch".into(), "3".into())])
                .unwrap();
            let loaded = FusionModel::load_checkpoint(&path).unwrap();
            assert_eq!(loaded.method(), method);
            assert_eq!(loaded.preset(), "mini-res-a");
            let p0 = model.predict(&acq).unwrap();
            let p1 = loaded.predict(&acq).unwrap();
            assert_eq!(
                p0.to_bits(),
                p1.to_bits(),
                "{method}: prediction changed across checkpoint roundtrip"
            );
            // Canonical re-serialization (modulo trainer metadata).
            let again = loaded.to_archive(&[("epoch".into(), "3".into())]);
            assert_eq!(model.to_archive(&[("epoch".into(), "3".into())]).to_bytes(), again.to_bytes());
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let model = build_fusion_model(FusionStrategy::Hierarchical, "mini-res-a", 23).unwrap();
        let archive = model.to_archive(&[]);

        let mut missing = archive.clone();
        let some_key = missing.tensors.keys().next().unwrap().clone();
        missing.tensors.remove(&some_key);
        let err = FusionModel::from_archive(&missing).unwrap_err();
        assert!(err.to_string().contains("missing tensor"), "{err}");

        let mut stray = archive.clone();
        stray.insert_tensor("p/backbone.structure/not.a.param", Tensor::zeros(&[2]));
        let err = FusionModel::from_archive(&stray).unwrap_err();
        assert!(err.to_string().contains("does not correspond"), "{err}");

        let mut bad_method = archive.clone();
        bad_method.insert_meta("method", "late");
        assert!(FusionModel::from_archive(&bad_method).is_err());

        let mut bad_version = archive;
        bad_version.insert_meta("checkpoint-version", "99");
        let err = FusionModel::from_archive(&bad_version).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let acq = test_acq(9, 4);
        let mut model = build_fusion_model(FusionStrategy::Early, "mini-res-a", 29).unwrap();
        let before = model.predict(&acq).unwrap();
        let snap = model.snapshot();
        for part in model.parts_mut() {
            let names: Vec<String> = part.params().names().map(str::to_string).collect();
            for n in names {
                for v in part.params_mut().get_mut(&n).unwrap().data_mut() {
                    *v += 0.25;
                }
            }
        }
        assert!(model.predict(&acq).unwrap() != before);
        model.restore(&snap).unwrap();
        assert_eq!(model.predict(&acq).unwrap().to_bits(), before.to_bits());

        // Mismatched snapshots are rejected.
        let other = build_fusion_model(FusionStrategy::Hierarchical, "mini-res-a", 29).unwrap();
        assert!(model.restore(&other.snapshot()).is_err());
    }

    #[test]
    fn method_strings_roundtrip() {
        for m in [
            Method::Single(ModalityId::Structure),
            Method::Single(ModalityId::Flow),
            Method::Single(ModalityId::Lso),
            Method::Fusion(FusionStrategy::Early),
            Method::Fusion(FusionStrategy::Intermediate),
            Method::Fusion(FusionStrategy::Hierarchical),
        ] {
            let s = m.as_string();
            let back: Method = s.parse().unwrap();
            assert_eq!(m, back);
        }
        assert!("late".parse::<Method>().is_err());
    }

    #[test]
    fn eval_repeat_and_batch_consistency() {
        let model = build_fusion_model(FusionStrategy::Intermediate, "mini-res-a", 31).unwrap();
        let acqs = vec![test_acq(10, 0), test_acq(11, 4)];
        let p1 = model.predict(&acqs[0]).unwrap();
        let p2 = model.predict(&acqs[0]).unwrap();
        assert_eq!(p1.to_bits(), p2.to_bits(), "eval must be repeatable");
        let batch = model.predict_batch(&acqs).unwrap();
        assert_eq!(batch[0].to_bits(), p1.to_bits());
    }
}
