//! Resampling and intensity normalization.
//!
//! Volumes are resampled with separable n-linear interpolation (corner
//! aligned: output index `i` maps to source coordinate
//! `i * (S-1) / (T-1)`), then each modality is min-max normalized to
//! `[0, 1]` per acquisition. A constant modality normalizes to all
//! zeros with a warning rather than dividing by zero.

use super::{Acquisition, Result};
use crate::tensor::Tensor;

/// Target grids for the three modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetGrids {
    pub volume: [usize; 3],
    pub lso: [usize; 2],
}

impl Default for TargetGrids {
    fn default() -> Self {
        TargetGrids {
            volume: [16, 64, 64],
            lso: [64, 64],
        }
    }
}

// ── Resampling ───────────────────────────────────────────────────────

/// Resample one axis by linear interpolation, leaving others intact.
fn resample_axis(data: &[f32], shape: &[usize], axis: usize, target: usize) -> (Vec<f32>, Vec<usize>) {
    let src = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = target;

    // View the array as [outer, src, inner].
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0f32; outer * target * inner];

    for o in 0..outer {
        for t in 0..target {
            let pos = if target == 1 {
                (src - 1) as f64 / 2.0
            } else {
                t as f64 * (src - 1) as f64 / (target - 1) as f64
            };
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            let frac = (pos - lo as f64) as f32;
            let base_lo = (o * src + lo) * inner;
            let base_hi = (o * src + hi) * inner;
            let base_out = (o * target + t) * inner;
            for i in 0..inner {
                let a = data[base_lo + i];
                let b = data[base_hi + i];
                out[base_out + i] = a + frac * (b - a);
            }
        }
    }
    (out, out_shape)
}

/// Separable n-linear resampling to `target` (same rank as the input).
pub fn resample_nlinear(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    use crate::tensor::TensorError;
    if target.len() != t.rank() {
        return Err(TensorError::InvalidShape {
            shape: target.to_vec(),
            reason: format!("resample target rank {} != tensor rank {}", target.len(), t.rank()),
        }
        .into());
    }
    if target.iter().any(|&e| e == 0) {
        return Err(TensorError::InvalidShape {
            shape: target.to_vec(),
            reason: "resample target has a zero extent".into(),
        }
        .into());
    }
    if target == t.shape() {
        return Ok(t.clone());
    }
    let mut data = t.data().to_vec();
    let mut shape = t.shape().to_vec();
    for axis in 0..shape.len() {
        if shape[axis] != target[axis] {
            let (d, s) = resample_axis(&data, &shape, axis, target[axis]);
            data = d;
            shape = s;
        }
    }
    Ok(Tensor::from_vec(shape, data)?)
}

// ── Normalization ────────────────────────────────────────────────────

/// Min-max normalize to [0, 1] in place; constant input becomes all
/// zeros (with a warning naming the context).
pub fn min_max_normalize(t: &mut Tensor, context: &str) {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in t.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if range <= 0.0 {
        log::warn!("constant-valued modality in {context}: normalizing to zeros");
        for v in t.data_mut() {
            *v = 0.0;
        }
        return;
    }
    for v in t.data_mut() {
        *v = (*v - lo) / range;
    }
}

/// Resample all three modalities to the target grids and min-max
/// normalize each per acquisition.
pub fn preprocess(acq: &Acquisition, grids: &TargetGrids) -> Result<Acquisition> {
    acq.validate()?;
    let mut structure = resample_nlinear(&acq.structure, &grids.volume)?;
    let mut flow = resample_nlinear(&acq.flow, &grids.volume)?;
    let mut lso = resample_nlinear(&acq.lso, &grids.lso)?;
    min_max_normalize(&mut structure, &format!("{} structure", acq.acquisition_id));
    min_max_normalize(&mut flow, &format!("{} flow", acq.acquisition_id));
    min_max_normalize(&mut lso, &format!("{} lso", acq.acquisition_id));
    Ok(Acquisition {
        acquisition_id: acq.acquisition_id.clone(),
        patient_id: acq.patient_id.clone(),
        icdr_grade: acq.icdr_grade,
        structure,
        flow,
        lso,
    })
}

// ── Tests ────────────────────────────────────────────────────────────
