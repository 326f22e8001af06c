//! Dense row-major f32 tensors.
//!
//! `Tensor` is the universal value type of the engine: images, volumes,
//! features, parameters and scores are all tensors. Values are kept finite
//! at all times — constructors reject NaN/Inf, and debug builds re-check
//! after every primitive op.

use rand::Rng;
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: String, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("concat along axis {axis}: input {index} has shape {got:?}, expected {expected:?} off-axis")]
    ConcatMismatch { axis: usize, index: usize, got: Vec<usize>, expected: Vec<usize> },
    #[error("channel mismatch: input has {got} channels, spec expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("conv/pool output extent would be {value} for dim {dim} (in={input}, k={kernel}, s={stride}, p={pad})")]
    OutputTooSmall { dim: usize, input: usize, kernel: usize, stride: usize, pad: usize, value: i64 },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Initialization schemes for `Tensor::create`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f32),
    Uniform { seed: u64, lo: f32, hi: f32 },
    /// He-uniform: U(-b, b) with b = sqrt(6 / fan_in), fan_in = numel / shape[0].
    /// Requires rank >= 2.
    KaimingUniform { seed: u64 },
}

/// Dense n-dimensional f32 array, row-major. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        validate_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("shape product {} != data length {}", numel, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec".into() });
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    /// Construct an op output. Shape/length agreement is the caller's
    /// invariant; finiteness is checked in debug builds only.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>, op: &str) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        #[cfg(debug_assertions)]
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.into() });
        }
        let _ = op;
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Constant(c) => {
                if !c.is_finite() {
                    return Err(TensorError::NonFinite { op: "create(constant)".into() });
                }
                vec![c; numel]
            }
            Init::Uniform { seed, lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(TensorError::Other(format!("invalid uniform range [{lo}, {hi})")));
                }
                let mut rng = rng::stream(seed, &[0x1]);
                (0..numel).map(|_| rng.gen_range(lo..hi)).collect()
            }
            Init::KaimingUniform { seed } => {
                if shape.len() < 2 {
                    return Err(TensorError::InvalidShape {
                        shape: shape.to_vec(),
                        reason: "kaiming init needs rank >= 2".into(),
                    });
                }
                let fan_in = (numel / shape[0]) as f64;
                let bound = (6.0 / fan_in).sqrt() as f32;
                let mut rng = rng::stream(seed, &[0x2]);
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::create(shape, Init::Zeros).expect("zeros with valid shape")
    }

    pub fn scalar(v: f32) -> Result<Self> {
        Tensor::from_vec(vec![], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// In-place access, reserved for optimizer updates and loaders.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        validate_shape(&shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("reshape of {} elements", self.numel()),
            });
        }
        Ok(Tensor { shape, data: self.data.clone(), requires_grad: self.requires_grad })
    }

    /// Concatenate along `axis`. All other extents must agree.
    pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Self> {
        if parts.is_empty() {
            return Err(TensorError::Other("concat of zero tensors".into()));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let mut out_shape = parts[0].shape.clone();
        let mut axis_total = 0usize;
        for (i, p) in parts.iter().enumerate() {
            if p.rank() != rank {
                return Err(TensorError::ConcatMismatch {
                    axis,
                    index: i,
                    got: p.shape.clone(),
                    expected: out_shape.clone(),
                });
            }
            for d in 0..rank {
                if d != axis && p.shape[d] != out_shape[d] {
                    return Err(TensorError::ConcatMismatch {
                        axis,
                        index: i,
                        got: p.shape.clone(),
                        expected: out_shape.clone(),
                    });
                }
            }
            axis_total += p.shape[axis];
        }
        out_shape[axis] = axis_total;

        let outer: usize = out_shape[..axis].iter().product();
        let tail: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * tail;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Tensor { shape: out_shape, data, requires_grad: false })
    }

    /// Inverse of `concat`: cut along `axis` at the given extents.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange { axis, rank: self.rank() });
        }
        if sizes.iter().sum::<usize>() != self.shape[axis] || sizes.iter().any(|&s| s == 0) {
            return Err(TensorError::Other(format!(
                "split sizes {:?} do not partition extent {}",
                sizes, self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let tail: usize = self.shape[axis + 1..].iter().product();
        let full_block = self.shape[axis] * tail;
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0usize;
        for &s in sizes {
            let mut shape = self.shape.clone();
            shape[axis] = s;
            let mut data = Vec::with_capacity(outer * s * tail);
            for o in 0..outer {
                let start = o * full_block + offset * tail;
                data.extend_from_slice(&self.data[start..start + s * tail]);
            }
            offset += s;
            out.push(Tensor { shape, data, requires_grad: false });
        }
        Ok(out)
    }

    /// Max |a - b| over elements; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "max_abs_diff".into(),
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max))
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "zero extent".into(),
        });
    }
    let mut numel = 1usize;
    for &e in shape {
        numel = numel.checked_mul(e).ok_or_else(|| TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extent product overflows".into(),
        })?;
    }
    Ok(())
}
