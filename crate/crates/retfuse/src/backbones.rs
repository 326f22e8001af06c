//! Mini residual- and dense-family feature extractors.
//!
//! Four presets scale the classic residual/dense backbone menu down to
//! desk size while keeping each family's topology: identity-skip conv
//! pairs with stride-2 conv transitions for the residual family, dense
//! connectivity with 1×1-compression + avg-pool transitions for the dense
//! family. The b-variant of each family is deeper than the a-variant, so
//! relative capacity ordering is preserved.
//!
//! Volumes are handled by true rank-3 convolution. Downsampling is
//! anisotropic: at every downsampling site, dims strictly smaller than
//! the current largest spatial extent keep stride 1, so a shallow depth
//! axis shrinks more slowly than the en-face axes. The stem conv is the
//! one exception — it always strides 2 isotropically.

use crate::conv::ConvSpec;
use crate::nn::{
    BatchNormLayer, BufferRegistry, ConvLayer, Forward, LinearLayer, Mode, ParamRegistry,
};
use crate::tape::NodeId;
use crate::tensor::{Result, Tensor, TensorError};

// ── Spec ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Residual,
    Dense,
}

/// One stage of the backbone. For the residual family `width` is the
/// stage's channel count; for the dense family it is the growth rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    pub preset: String,
    pub family: Family,
    /// 2 for planar inputs, 3 for volumes.
    pub spatial_rank: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    /// Dense-family transition compression in (0, 1]; ignored for the
    /// residual family.
    pub compression: f32,
}

pub const PRESET_NAMES: [&str; 4] = ["mini-res-a", "mini-res-b", "mini-dense-a", "mini-dense-b"];

impl BackboneSpec {
    /// One of `mini-res-a|mini-res-b|mini-dense-a|mini-dense-b`, at the
    /// requested spatial rank.
    pub fn preset(name: &str, spatial_rank: usize) -> Result<Self> {
        let (family, stem_channels, stages, compression) = match name {
            "mini-res-a" => (
                Family::Residual,
                4,
                vec![
                    StageSpec { blocks: 1, width: 4 },
                    StageSpec { blocks: 1, width: 8 },
                    StageSpec { blocks: 1, width: 16 },
                ],
                1.0,
            ),
            "mini-res-b" => (
                Family::Residual,
                4,
                vec![
                    StageSpec { blocks: 2, width: 4 },
                    StageSpec { blocks: 2, width: 8 },
                    StageSpec { blocks: 2, width: 16 },
                ],
                1.0,
            ),
            "mini-dense-a" => (
                Family::Dense,
                8,
                vec![
                    StageSpec { blocks: 2, width: 4 },
                    StageSpec { blocks: 2, width: 4 },
                    StageSpec { blocks: 2, width: 4 },
                ],
                0.5,
            ),
            "mini-dense-b" => (
                Family::Dense,
                8,
                vec![
                    StageSpec { blocks: 3, width: 6 },
                    StageSpec { blocks: 3, width: 6 },
                    StageSpec { blocks: 3, width: 6 },
                ],
                0.5,
            ),
            other => {
                return Err(TensorError::Other(format!(
                    "unknown backbone preset '{other}' (expected one of {PRESET_NAMES:?})"
                )))
            }
        };
        let spec = Self {
            preset: name.to_string(),
            family,
            spatial_rank,
            stem_channels,
            stages,
            compression,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_rank != 2 && self.spatial_rank != 3 {
            return Err(TensorError::Other(format!(
                "backbone spatial rank must be 2 or 3, got {}",
                self.spatial_rank
            )));
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s.blocks == 0 || s.width == 0) {
            return Err(TensorError::Other(
                "backbone needs >= 1 stage, each with >= 1 block of width >= 1".into(),
            ));
        }
        if self.stem_channels == 0 {
            return Err(TensorError::Other("stem channels must be >= 1".into()));
        }
        match self.family {
            Family::Dense => {
                if !(self.compression > 0.0 && self.compression <= 1.0) {
                    return Err(TensorError::Other(format!(
                        "dense compression must be in (0, 1], got {}",
                        self.compression
                    )));
                }
            }
            Family::Residual => {
                if self.stages[0].width != self.stem_channels {
                    return Err(TensorError::Other(format!(
                        "residual stage 1 width {} must equal stem channels {}",
                        self.stages[0].width, self.stem_channels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Spatial extents entering the last stage, tracking the exact
    /// conv/pool arithmetic of the forward pass: stem conv (isotropic
    /// stride 2), stem pool, and one anisotropic downsampling
    /// transition per stage boundary.
    pub fn last_stage_extents(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != self.spatial_rank || input.iter().any(|&v| v == 0) {
            return Err(TensorError::Other(format!(
                "expected {} nonzero spatial extents, got {input:?}",
                self.spatial_rank
            )));
        }
        // Kernel-3 pad-1 conv (and the stem pool) map v -> (v-1)/s + 1.
        let conv = |v: usize, s: usize| (v - 1) / s + 1;
        let mut e: Vec<usize> = input.iter().map(|&v| conv(v, 2)).collect();
        let strides = downsample_strides(&e);
        check_downsample(&e, &strides, "stem pool")?;
        e = e.iter().zip(&strides).map(|(&v, &s)| conv(v, s)).collect();
        for _ in 0..self.stages.len().saturating_sub(1) {
            let strides = downsample_strides(&e);
            check_downsample(&e, &strides, "downsample")?;
            e = e
                .iter()
                .zip(&strides)
                .map(|(&v, &s)| match self.family {
                    Family::Residual => conv(v, s),
                    // Dense transitions pool with kernel = stride.
                    Family::Dense => v / s,
                })
                .collect();
        }
        Ok(e)
    }

    /// Err when training at these input extents could only produce a
    /// dead model. Residual transitions batch-normalize a 1×1(×1)
    /// last stage to exactly β = 0 per sample, so the features and
    /// every upstream gradient vanish. Dense stages concatenate their
    /// input past such layers and merely waste the collapsed stage,
    /// so they are not rejected.
    pub fn check_train_viability(&self, input: &[usize]) -> Result<()> {
        if self.family != Family::Residual {
            return Ok(());
        }
        let last = self.last_stage_extents(input)?;
        if last.iter().product::<usize>() < 2 {
            return Err(TensorError::Other(format!(
                "'{}': spatial input {input:?} collapses to {last:?} at the last stage, \
                 where per-sample batch norm zeroes every channel; use en-face extents \
                 of ~24 and up",
                self.preset
            )));
        }
        Ok(())
    }

    /// Channel count entering each stage, and the final feature dim.
    fn channel_plan(&self) -> (Vec<usize>, usize) {
        let mut c = self.stem_channels;
        let mut plan = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            plan.push(c);
            match self.family {
                Family::Residual => c = st.width,
                Family::Dense => c += st.blocks * st.width,
            }
            if i + 1 < self.stages.len() {
                match self.family {
                    Family::Residual => c = self.stages[i + 1].width,
                    Family::Dense => c = ((c as f32 * self.compression).floor() as usize).max(1),
                }
            }
        }
        (plan, c)
    }
}

// ── Downsampling geometry ─────────────────────────────────────────────

/// Stride per spatial dim at a downsampling site: dims strictly smaller
/// than the current max extent keep stride 1.
fn downsample_strides(extents: &[usize]) -> Vec<usize> {
    let mx = extents.iter().copied().max().unwrap_or(1);
    extents
        .iter()
        .map(|&e| if e < mx { 1 } else { 2 })
        .collect()
}

/// A stride-2 dim must have extent >= 2 for downsampling to be
/// meaningful; otherwise report which site ran out of space.
fn check_downsample(extents: &[usize], strides: &[usize], site: &str) -> Result<()> {
    for (d, (&e, &s)) in extents.iter().zip(strides).enumerate() {
        if s == 2 && e < 2 {
            return Err(TensorError::Other(format!(
                "{site}: spatial extents {extents:?} too small to downsample (dim {d})"
            )));
        }
    }
    Ok(())
}

fn with_site<T>(r: Result<T>, site: &str) -> Result<T> {
    r.map_err(|e| match e {
        TensorError::Other(msg) if msg.starts_with(site) => TensorError::Other(msg),
        e => TensorError::Other(format!("{site}: {e}")),
    })
}

// ── Components ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct Stem {
    conv: ConvLayer,
    bn: BatchNormLayer,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: ConvLayer,
    bn1: BatchNormLayer,
    conv2: ConvLayer,
    bn2: BatchNormLayer,
}

#[derive(Debug, Clone)]
struct DenseLayer {
    bn: BatchNormLayer,
    conv: ConvLayer,
}

#[derive(Debug, Clone)]
enum StageBody {
    Residual(Vec<ResBlock>),
    Dense(Vec<DenseLayer>),
}

#[derive(Debug, Clone)]
enum Transition {
    /// Stride-2 conv + bn + relu.
    Residual { conv: ConvLayer, bn: BatchNormLayer },
    /// bn + relu + 1×1 compression conv + stride-2 avg pool.
    Dense { bn: BatchNormLayer, conv: ConvLayer },
}

// ── Feature extractor ─────────────────────────────────────────────────

/// Stem → stages (with downsampling transitions) → global average pool.
/// Owns its parameters and batch-norm running stats.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub spec: BackboneSpec,
    pub in_channels: usize,
    pub feature_dim: usize,
    pub params: ParamRegistry,
    pub buffers: BufferRegistry,
    stem: Stem,
    stages: Vec<StageBody>,
    transitions: Vec<Transition>,
}

/// Build an extractor from a spec; `seed` drives every weight init
/// through per-name streams, so equal (spec, in_channels, seed) gives
/// identical registries.
pub fn build_backbone(spec: &BackboneSpec, in_channels: usize, seed: u64) -> Result<FeatureExtractor> {
    spec.validate()?;
    if in_channels == 0 {
        return Err(TensorError::Other("backbone needs in_channels >= 1".into()));
    }
    let r = spec.spatial_rank;
    let k3 = ConvSpec::isotropic(r, 3, 1, 1)?;
    let stem_spec = ConvSpec::isotropic(r, 3, 2, 1)?;
    let mut params = ParamRegistry::new();
    let mut buffers = BufferRegistry::new();

    let stem = Stem {
        conv: ConvLayer::register(
            &mut params,
            "stem.conv",
            in_channels,
            spec.stem_channels,
            stem_spec,
            false,
            seed,
        )?,
        bn: BatchNormLayer::register(&mut params, &mut buffers, "stem.bn", spec.stem_channels)?,
    };

    let (plan, feature_dim) = spec.channel_plan();
    let mut stages = Vec::with_capacity(spec.stages.len());
    let mut transitions = Vec::new();
    for (i, st) in spec.stages.iter().enumerate() {
        let mut c = plan[i];
        let body = match spec.family {
            Family::Residual => {
                let mut blocks = Vec::with_capacity(st.blocks);
                for b in 0..st.blocks {
                    let p = format!("stage{}.block{}", i + 1, b);
                    blocks.push(ResBlock {
                        conv1: ConvLayer::register(
                            &mut params,
                            &format!("{p}.conv1"),
                            st.width,
                            st.width,
                            k3.clone(),
                            false,
                            seed,
                        )?,
                        bn1: BatchNormLayer::register(
                            &mut params,
                            &mut buffers,
                            &format!("{p}.bn1"),
                            st.width,
                        )?,
                        conv2: ConvLayer::register(
                            &mut params,
                            &format!("{p}.conv2"),
                            st.width,
                            st.width,
                            k3.clone(),
                            false,
                            seed,
                        )?,
                        bn2: BatchNormLayer::register(
                            &mut params,
                            &mut buffers,
                            &format!("{p}.bn2"),
                            st.width,
                        )?,
                    });
                }
                StageBody::Residual(blocks)
            }
            Family::Dense => {
                let mut layers = Vec::with_capacity(st.blocks);
                for l in 0..st.blocks {
                    let p = format!("stage{}.layer{}", i + 1, l);
                    layers.push(DenseLayer {
                        bn: BatchNormLayer::register(
                            &mut params,
                            &mut buffers,
                            &format!("{p}.bn"),
                            c,
                        )?,
                        conv: ConvLayer::register(
                            &mut params,
                            &format!("{p}.conv"),
                            c,
                            st.width,
                            k3.clone(),
                            false,
                            seed,
                        )?,
                    });
                    c += st.width;
                }
                StageBody::Dense(layers)
            }
        };
        stages.push(body);

        if i + 1 < spec.stages.len() {
            let p = format!("transition{}", i + 1);
            let t = match spec.family {
                Family::Residual => Transition::Residual {
                    conv: ConvLayer::register(
                        &mut params,
                        &format!("{p}.conv"),
                        spec.stages[i].width,
                        spec.stages[i + 1].width,
                        k3.clone(),
                        false,
                        seed,
                    )?,
                    bn: BatchNormLayer::register(
                        &mut params,
                        &mut buffers,
                        &format!("{p}.bn"),
                        spec.stages[i + 1].width,
                    )?,
                },
                Family::Dense => Transition::Dense {
                    bn: BatchNormLayer::register(&mut params, &mut buffers, &format!("{p}.bn"), c)?,
                    conv: ConvLayer::register(
                        &mut params,
                        &format!("{p}.conv"),
                        c,
                        plan[i + 1],
                        ConvSpec::isotropic(r, 1, 1, 0)?,
                        false,
                        seed,
                    )?,
                },
            };
            transitions.push(t);
        }
    }

    Ok(FeatureExtractor {
        spec: spec.clone(),
        in_channels,
        feature_dim,
        params,
        buffers,
        stem,
        stages,
        transitions,
    })
}

impl FeatureExtractor {
    /// Per-sample forward on an existing context: `[C, spatial…]` →
    /// `[feature_dim]`.
    ///
    /// Train-mode batch norm uses per-sample spatial statistics, so
    /// residual inputs whose last stage collapses to a single spatial
    /// position are rejected rather than silently training a dead
    /// network (see [`BackboneSpec::check_train_viability`]). En-face
    /// extents of 24 and up are safe for every preset; the default
    /// grids give the last stage 4×4(×4).
    pub fn forward_sample(&self, fwd: &mut Forward, x: NodeId) -> Result<NodeId> {
        let shape = fwd.tape.value(x).shape().to_vec();
        if shape.len() != self.spec.spatial_rank + 1 || shape[0] != self.in_channels {
            return Err(TensorError::Other(format!(
                "backbone '{}' expects [{}, {}-D spatial] input, got shape {shape:?}",
                self.spec.preset, self.in_channels, self.spec.spatial_rank
            )));
        }
        if fwd.mode == Mode::Train {
            self.spec
                .check_train_viability(&shape[1..])
                .map_err(|e| TensorError::Other(format!("backbone {e}")))?;
        }

        // Stem: isotropic stride-2 conv, bn, relu, anisotropic max pool.
        let h = with_site(self.stem.conv.forward(fwd, x), "stem")?;
        let h = with_site(self.stem.bn.forward(fwd, h), "stem")?;
        let mut h = with_site(fwd.tape.relu(h), "stem")?;
        {
            let ext = fwd.tape.value(h).shape()[1..].to_vec();
            let strides = downsample_strides(&ext);
            check_downsample(&ext, &strides, "stem pool")?;
            let pool = ConvSpec::new(vec![3; ext.len()], strides, vec![1; ext.len()])?;
            h = with_site(fwd.tape.max_pool(h, &pool), "stem pool")?;
        }

        for (i, stage) in self.stages.iter().enumerate() {
            let site = format!("stage{}", i + 1);
            h = with_site(self.stage_forward(stage, fwd, h), &site)?;
            if let Some(t) = self.transitions.get(i) {
                let site = format!("transition{}", i + 1);
                h = with_site(self.transition_forward(t, fwd, h), &site)?;
            }
        }
        fwd.tape.global_avg_pool(h)
    }

    fn stage_forward(&self, stage: &StageBody, fwd: &mut Forward, mut h: NodeId) -> Result<NodeId> {
        match stage {
            StageBody::Residual(blocks) => {
                for b in blocks {
                    let skip = h;
                    let v = b.conv1.forward(fwd, h)?;
                    let v = b.bn1.forward(fwd, v)?;
                    let v = fwd.tape.relu(v)?;
                    let v = b.conv2.forward(fwd, v)?;
                    let v = b.bn2.forward(fwd, v)?;
                    let s = fwd.tape.add(v, skip)?;
                    h = fwd.tape.relu(s)?;
                }
            }
            StageBody::Dense(layers) => {
                for l in layers {
                    let v = l.bn.forward(fwd, h)?;
                    let v = fwd.tape.relu(v)?;
                    let v = l.conv.forward(fwd, v)?;
                    h = fwd.tape.concat(0, &[h, v])?;
                }
            }
        }
        Ok(h)
    }

    fn transition_forward(&self, t: &Transition, fwd: &mut Forward, h: NodeId) -> Result<NodeId> {
        let ext = fwd.tape.value(h).shape()[1..].to_vec();
        let strides = downsample_strides(&ext);
        check_downsample(&ext, &strides, "downsample")?;
        match t {
            Transition::Residual { conv, bn } => {
                let spec = ConvSpec::new(vec![3; ext.len()], strides, vec![1; ext.len()])?;
                let v = conv.forward_with_spec(fwd, h, &spec)?;
                let v = bn.forward(fwd, v)?;
                fwd.tape.relu(v)
            }
            Transition::Dense { bn, conv } => {
                let v = bn.forward(fwd, h)?;
                let v = fwd.tape.relu(v)?;
                let v = conv.forward(fwd, v)?;
                // Pool kernel = stride per dim (1 or 2), no padding.
                let pool = ConvSpec::new(strides.clone(), strides, vec![0; ext.len()])?;
                fwd.tape.avg_pool(v, &pool)
            }
        }
    }

    /// Batched eval-mode features: `[N, C, spatial…]` → `[N, feature_dim]`.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.rank() != self.spec.spatial_rank + 2 {
            return Err(TensorError::Other(format!(
                "batched input must be [N, {}, {}-D spatial], got shape {:?}",
                self.in_channels,
                self.spec.spatial_rank,
                batch.shape()
            )));
        }
        let n = batch.shape()[0];
        let sample_shape = batch.shape()[1..].to_vec();
        let mut rows = Vec::with_capacity(n);
        for part in batch.split(0, &vec![1; n])? {
            let sample = part.reshaped(sample_shape.clone())?;
            let mut tape = crate::tape::GradTape::new();
            let mut fwd = Forward::new(&mut tape, &self.params, &self.buffers, Mode::Eval);
            let x = fwd.input(sample);
            let f = self.forward_sample(&mut fwd, x)?;
            rows.push(tape.value(f).reshaped(vec![1, self.feature_dim])?);
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::concat(0, &refs)
    }
}

/// Binary decision head: linear map on pooled features. Sigmoid is
/// applied by the caller (fusion strategies differ in where).
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub in_features: usize,
    pub params: ParamRegistry,
    pub buffers: BufferRegistry,
    linear: LinearLayer,
}

impl ClassifierHead {
    pub fn new(in_features: usize, seed: u64) -> Result<Self> {
        let mut params = ParamRegistry::new();
        let linear = LinearLayer::register(&mut params, "head", in_features, 1, seed)?;
        Ok(Self {
            in_features,
            params,
            buffers: BufferRegistry::new(),
            linear,
        })
    }

    /// `[in_features]` → `[1]` logit.
    pub fn forward_sample(&self, fwd: &mut Forward, x: NodeId) -> Result<NodeId> {
        self.linear.forward(fwd, x)
    }
}

// ── Tests ─────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::GradTape;
    use crate::tensor::Init;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        Tensor::create(
            shape,
            Init::Uniform {
                seed,
                lo: -1.0,
                hi: 1.0,
            },
        )
        .unwrap()
    }

    fn run_sample(fx: &FeatureExtractor, x: Tensor, mode: Mode) -> Result<Vec<f32>> {
        let mut tape = GradTape::new();
        let mut fwd = Forward::new(&mut tape, &fx.params, &fx.buffers, mode);
        let xid = fwd.input(x);
        let f = fx.forward_sample(&mut fwd, xid)?;
        Ok(tape.value(f).data().to_vec())
    }

    #[test]
    fn presets_build_at_both_ranks() {
        for name in PRESET_NAMES {
            for rank in [2usize, 3] {
                let spec = BackboneSpec::preset(name, rank).unwrap();
                let fx = build_backbone(&spec, 1, 7).unwrap();
                assert!(fx.feature_dim >= 8, "{name} feature dim {}", fx.feature_dim);
            }
        }
        assert!(BackboneSpec::preset("resnet50", 2).is_err());
    }

    #[test]
    fn feature_dims_match_channel_plan() {
        // Hand-computed from the preset tables.
        for (name, dim) in [
            ("mini-res-a", 16),
            ("mini-res-b", 16),
            ("mini-dense-a", 16),
            ("mini-dense-b", 33),
        ] {
            let spec = BackboneSpec::preset(name, 3).unwrap();
            let fx = build_backbone(&spec, 1, 0).unwrap();
            assert_eq!(fx.feature_dim, dim, "{name}");
        }
    }

    #[test]
    fn parameter_counts_are_monotone_within_family() {
        let count = |name: &str, rank: usize| {
            let spec = BackboneSpec::preset(name, rank).unwrap();
            build_backbone(&spec, 1, 0).unwrap().params.numel()
        };
        for rank in [2usize, 3] {
            assert!(count("mini-res-b", rank) > count("mini-res-a", rank));
            assert!(count("mini-dense-b", rank) > count("mini-dense-a", rank));
        }
        // Golden counts: catches accidental preset/topology drift.
        assert_eq!(count("mini-res-a", 3), 22740);
        assert_eq!(count("mini-res-b", 3), 40996);
        assert_eq!(count("mini-dense-a", 3), 7152);
        assert_eq!(count("mini-dense-b", 3), 27717);
        // All presets stay desk-scale.
        for name in PRESET_NAMES {
            assert!(count(name, 3) <= 300_000);
        }
    }

    #[test]
    fn same_seed_same_registries() {
        let spec = BackboneSpec::preset("mini-dense-a", 2).unwrap();
        let a = build_backbone(&spec, 1, 11).unwrap();
        let b = build_backbone(&spec, 1, 11).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_backbone(&spec, 1, 12).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn volumetric_forward_shapes() {
        let spec = BackboneSpec::preset("mini-res-a", 3).unwrap();
        let fx = build_backbone(&spec, 1, 3).unwrap();
        let batch = rand_input(&[2, 1, 16, 32, 32], 5);
        let f = fx.features(&batch).unwrap();
        assert_eq!(f.shape(), &[2, fx.feature_dim]);
    }

    #[test]
    fn planar_forward_shapes() {
        let spec = BackboneSpec::preset("mini-dense-a", 2).unwrap();
        let fx = build_backbone(&spec, 1, 3).unwrap();
        let batch = rand_input(&[2, 1, 64, 64], 6);
        let f = fx.features(&batch).unwrap();
        assert_eq!(f.shape(), &[2, fx.feature_dim]);
    }

    #[test]
    fn features_invariant_to_batch_composition() {
        let spec = BackboneSpec::preset("mini-res-a", 2).unwrap();
        let fx = build_backbone(&spec, 1, 9).unwrap();
        let a = rand_input(&[1, 1, 32, 32], 21);
        let b = rand_input(&[1, 1, 32, 32], 22);
        let ab = Tensor::concat(0, &[&a, &b]).unwrap();
        let fa = fx.features(&a).unwrap();
        let fab = fx.features(&ab).unwrap();
        assert_eq!(&fab.data()[..fx.feature_dim], fa.data());
    }

    #[test]
    fn residual_block_with_zeroed_branch_is_identity() {
        let spec = BackboneSpec::preset("mini-res-a", 2).unwrap();
        let mut fx = build_backbone(&spec, 1, 4).unwrap();
        // Zero every branch weight and final-bn γ in stage 1's block.
        for name in ["stage1.block0.conv1.weight", "stage1.block0.conv2.weight"] {
            let t = fx.params.get_mut(name).unwrap();
            t.data_mut().fill(0.0);
        }
        fx.params
            .get_mut("stage1.block0.bn2.gamma")
            .unwrap()
            .data_mut()
            .fill(0.0);
        // Feed a non-negative activation directly through the block.
        let x = Tensor::create(&[4, 6, 6], Init::Uniform { seed: 1, lo: 0.0, hi: 1.0 }).unwrap();
        let mut tape = GradTape::new();
        let mut fwd = Forward::new(&mut tape, &fx.params, &fx.buffers, Mode::Eval);
        let xid = fwd.input(x.clone());
        let StageBody::Residual(blocks) = &fx.stages[0] else {
            panic!("residual preset")
        };
        let y = {
            let b = &blocks[0];
            let v = b.conv1.forward(&mut fwd, xid).unwrap();
            let v = b.bn1.forward(&mut fwd, v).unwrap();
            let v = fwd.tape.relu(v).unwrap();
            let v = b.conv2.forward(&mut fwd, v).unwrap();
            let v = b.bn2.forward(&mut fwd, v).unwrap();
            let s = fwd.tape.add(v, xid).unwrap();
            fwd.tape.relu(s).unwrap()
        };
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn residual_block_gradients_reach_both_paths() {
        let spec = BackboneSpec::preset("mini-res-a", 2).unwrap();
        let fx = build_backbone(&spec, 1, 8).unwrap();
        // 24×24 keeps the pre-pool extent ≥ 2×2; see the train-mode
        // batch-norm note on `forward_sample`.
        let x = rand_input(&[1, 24, 24], 30);
        let mut tape = GradTape::new();
        let mut fwd = Forward::new(&mut tape, &fx.params, &fx.buffers, Mode::Train);
        let xid = fwd.input(x);
        let f = fx.forward_sample(&mut fwd, xid).unwrap();
        let loss = {
            let t = &mut fwd.tape;
            t.sum(f).unwrap()
        };
        let bindings = fwd.bindings().clone();
        let g = tape.backward(loss).unwrap();
        // Branch weights and the stem (pre-skip path) both get nonzero grads.
        for name in ["stage1.block0.conv1.weight", "stem.conv.weight"] {
            let id = bindings[name];
            let nonzero = g.wrt(id).iter().any(|&v| v != 0.0);
            assert!(nonzero, "{name} gradient all zero");
        }
    }

    #[test]
    fn dense_block_channel_arithmetic_and_provenance() {
        let spec = BackboneSpec::preset("mini-dense-a", 2).unwrap();
        let mut fx = build_backbone(&spec, 1, 2).unwrap();
        // in=8, 2 layers of growth 4 → stage 1 output channels 16.
        let x = rand_input(&[1, 32, 32], 40);
        let probe = |fx: &FeatureExtractor| -> Tensor {
            let mut tape = GradTape::new();
            let mut fwd = Forward::new(&mut tape, &fx.params, &fx.buffers, Mode::Eval);
            let xid = fwd.input(x.clone());
            let h = fx.stem.conv.forward(&mut fwd, xid).unwrap();
            let h = fx.stem.bn.forward(&mut fwd, h).unwrap();
            let h = fwd.tape.relu(h).unwrap();
            let h = fx.stage_forward(&fx.stages[0], &mut fwd, h).unwrap();
            tape.value(h).clone()
        };
        let base = probe(&fx);
        assert_eq!(base.shape()[0], 16);
        // Zero layer 1's conv: exactly its growth slice (channels 12..16)
        // becomes zero; earlier slices are untouched.
        fx.params
            .get_mut("stage1.layer1.conv.weight")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let z = probe(&fx);
        let sp: usize = z.shape()[1..].iter().product();
        assert_eq!(&z.data()[..12 * sp], &base.data()[..12 * sp]);
        assert!(z.data()[12 * sp..].iter().all(|&v| v == 0.0));
        assert!(base.data()[12 * sp..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn sizing_error_names_the_stage() {
        let spec = BackboneSpec::preset("mini-dense-a", 2).unwrap();
        let fx = build_backbone(&spec, 1, 1).unwrap();
        // 8×8 input: stem → 4×4, pool → 2×2, t1 → 1×1, t2 has nothing
        // left to halve.
        let err = run_sample(&fx, rand_input(&[1, 8, 8], 50), Mode::Eval).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("transition2"), "got: {msg}");
    }

    #[test]
    fn head_produces_single_logit() {
        let head = ClassifierHead::new(16, 3).unwrap();
        let mut tape = GradTape::new();
        let mut fwd = Forward::new(&mut tape, &head.params, &head.buffers, Mode::Eval);
        let x = fwd.input(Tensor::zeros(&[16]));
        let y = head.forward_sample(&mut fwd, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1]);
    }
}
