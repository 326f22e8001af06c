//! Direct convolution and pooling kernels, rank-2 and rank-3 spatial.
//!
//! Layouts are channels-first and per-sample: conv input `[C_in, spatial…]`,
//! weight `[C_out, C_in, kernel…]`, output `[C_out, out_spatial…]`. Pooling
//! maps `[C, spatial…]` to `[C, out_spatial…]`. The batch loop lives above
//! this module.
//!
//! Rank-2 inputs are promoted internally to depth-1 rank-3 (kernel depth 1,
//! stride 1, pad 0) so every operation has exactly one arithmetic code path.
//! Inner products and window sums accumulate in f64 to keep results stable
//! under operand reordering.

use crate::tensor::{Result, TensorError};

// ── Geometry ──────────────────────────────────────────────────────────

/// Kernel/stride/padding triple for one conv or pool site. All three carry
/// one entry per spatial dim (rank 2 or 3).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub pad: Vec<usize>,
}

impl ConvSpec {
    pub fn new(kernel: Vec<usize>, stride: Vec<usize>, pad: Vec<usize>) -> Result<Self> {
        let r = kernel.len();
        if r < 2 || r > 3 {
            return Err(TensorError::Other(format!(
                "conv spec supports 2 or 3 spatial dims, got {r}"
            )));
        }
        if stride.len() != r || pad.len() != r {
            return Err(TensorError::Other(format!(
                "conv spec fields disagree on rank: kernel {r}, stride {}, pad {}",
                stride.len(),
                pad.len()
            )));
        }
        if kernel.iter().any(|&k| k == 0) || stride.iter().any(|&s| s == 0) {
            return Err(TensorError::Other(
                "conv kernel and stride entries must be >= 1".into(),
            ));
        }
        Ok(Self { kernel, stride, pad })
    }

    /// Uniform spec: same kernel/stride/pad in every spatial dim.
    pub fn isotropic(rank: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        Self::new(vec![kernel; rank], vec![stride; rank], vec![pad; rank])
    }

    pub fn spatial_rank(&self) -> usize {
        self.kernel.len()
    }

    /// `out = floor((in + 2·pad − kernel) / stride) + 1`, which must be ≥ 1.
    pub fn out_extent(&self, dim: usize, input: usize) -> Result<usize> {
        let (k, s, p) = (self.kernel[dim], self.stride[dim], self.pad[dim]);
        let numer = input as i64 + 2 * p as i64 - k as i64;
        if numer < 0 {
            return Err(TensorError::OutputTooSmall {
                dim,
                input,
                kernel: k,
                stride: s,
                pad: p,
                value: numer.div_euclid(s as i64) + 1,
            });
        }
        Ok((numer / s as i64 + 1) as usize)
    }

    pub fn out_shape(&self, in_spatial: &[usize]) -> Result<Vec<usize>> {
        if in_spatial.len() != self.spatial_rank() {
            return Err(TensorError::Other(format!(
                "spec has {} spatial dims but input has {}",
                self.spatial_rank(),
                in_spatial.len()
            )));
        }
        (0..in_spatial.len())
            .map(|d| self.out_extent(d, in_spatial[d]))
            .collect()
    }
}

// ── Rank promotion ────────────────────────────────────────────────────

/// (extents, kernel, stride, pad) promoted to 3 spatial dims.
struct Geom3 {
    ext: [usize; 3],
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    out: [usize; 3],
}

fn promote(in_spatial: &[usize], spec: &ConvSpec) -> Result<Geom3> {
    let out = spec.out_shape(in_spatial)?;
    let lift = |v: &[usize], fill: usize| -> [usize; 3] {
        match v.len() {
            2 => [fill, v[0], v[1]],
            _ => [v[0], v[1], v[2]],
        }
    };
    Ok(Geom3 {
        ext: lift(in_spatial, 1),
        k: lift(&spec.kernel, 1),
        s: lift(&spec.stride, 1),
        p: lift(&spec.pad, 0),
        out: lift(&out, 1),
    })
}

/// Valid kernel-offset range for one output coordinate: indices `kk` with
/// `0 <= o·s − p + kk < extent`.
#[inline]
fn kernel_range(o: usize, s: usize, p: usize, k: usize, extent: usize) -> (usize, usize, i64) {
    let start = o as i64 * s as i64 - p as i64;
    let lo = (-start).max(0) as usize;
    let hi = k.min((extent as i64 - start).max(0) as usize);
    (lo, hi, start)
}

// ── Convolution ───────────────────────────────────────────────────────

fn check_conv_shapes(x_shape: &[usize], w_shape: &[usize], spec: &ConvSpec) -> Result<()> {
    let r = spec.spatial_rank();
    if x_shape.len() != r + 1 {
        return Err(TensorError::Other(format!(
            "conv input must be [channels, {r} spatial dims], got shape {x_shape:?}"
        )));
    }
    if w_shape.len() != r + 2 || &w_shape[2..] != spec.kernel.as_slice() {
        return Err(TensorError::Other(format!(
            "conv weight shape {w_shape:?} does not match kernel {:?}",
            spec.kernel
        )));
    }
    if w_shape[1] != x_shape[0] {
        return Err(TensorError::ChannelMismatch {
            expected: w_shape[1],
            got: x_shape[0],
        });
    }
    Ok(())
}

/// Direct convolution (cross-correlation convention). Returns the output
/// buffer and its shape `[C_out, out_spatial…]`.
pub fn conv_forward(
    x: &[f32],
    x_shape: &[usize],
    w: &[f32],
    w_shape: &[usize],
    bias: Option<&[f32]>,
    spec: &ConvSpec,
) -> Result<(Vec<f32>, Vec<usize>)> {
    check_conv_shapes(x_shape, w_shape, spec)?;
    let (cin, cout) = (x_shape[0], w_shape[0]);
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(TensorError::Other(format!(
                "conv bias has {} entries for {cout} output channels",
                b.len()
            )));
        }
    }
    let g = promote(&x_shape[1..], spec)?;
    let [id, ih, iw] = g.ext;
    let [od, oh, ow] = g.out;
    let mut out = vec![0f32; cout * od * oh * ow];
    let x_ch = id * ih * iw;
    let w_ch = g.k[0] * g.k[1] * g.k[2];
    let mut oi = 0usize;
    for co in 0..cout {
        let b = bias.map_or(0f64, |b| b[co] as f64);
        let w_co = co * cin * w_ch;
        for oz in 0..od {
            let (kz0, kz1, z0) = kernel_range(oz, g.s[0], g.p[0], g.k[0], id);
            for oy in 0..oh {
                let (ky0, ky1, y0) = kernel_range(oy, g.s[1], g.p[1], g.k[1], ih);
                for ox in 0..ow {
                    let (kx0, kx1, x0) = kernel_range(ox, g.s[2], g.p[2], g.k[2], iw);
                    let mut acc = b;
                    for ci in 0..cin {
                        let xb = ci * x_ch;
                        let wb = w_co + ci * w_ch;
                        for kz in kz0..kz1 {
                            let iz = (z0 + kz as i64) as usize;
                            let xz = xb + iz * ih * iw;
                            let wz = wb + kz * g.k[1] * g.k[2];
                            for ky in ky0..ky1 {
                                let iy = (y0 + ky as i64) as usize;
                                // x0 may be negative; kx0 shifts back in range.
                                let xr = (xz + iy * iw) as i64 + x0;
                                let wr = wz + ky * g.k[2];
                                for kx in kx0..kx1 {
                                    let xi = (xr + kx as i64) as usize;
                                    acc += x[xi] as f64 * w[wr + kx] as f64;
                                }
                            }
                        }
                    }
                    out[oi] = acc as f32;
                    oi += 1;
                }
            }
        }
    }
    let mut out_shape = vec![cout];
    out_shape.extend(spec.out_shape(&x_shape[1..])?);
    Ok((out, out_shape))
}

/// Accumulates conv gradients into `gx`, `gw`, `gb` (all pre-zeroed or
/// carrying prior accumulation; this routine adds).
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    x: &[f32],
    x_shape: &[usize],
    w: &[f32],
    w_shape: &[usize],
    spec: &ConvSpec,
    gy: &[f32],
    gx: &mut [f32],
    gw: &mut [f32],
    gb: Option<&mut [f32]>,
) -> Result<()> {
    check_conv_shapes(x_shape, w_shape, spec)?;
    let (cin, cout) = (x_shape[0], w_shape[0]);
    let g = promote(&x_shape[1..], spec)?;
    let [id, ih, iw] = g.ext;
    let [od, oh, ow] = g.out;
    let x_ch = id * ih * iw;
    let w_ch = g.k[0] * g.k[1] * g.k[2];
    let mut oi = 0usize;
    let mut gb = gb;
    for co in 0..cout {
        let w_co = co * cin * w_ch;
        let mut gb_acc = 0f64;
        for oz in 0..od {
            let (kz0, kz1, z0) = kernel_range(oz, g.s[0], g.p[0], g.k[0], id);
            for oy in 0..oh {
                let (ky0, ky1, y0) = kernel_range(oy, g.s[1], g.p[1], g.k[1], ih);
                for ox in 0..ow {
                    let (kx0, kx1, x0) = kernel_range(ox, g.s[2], g.p[2], g.k[2], iw);
                    let gov = gy[oi] as f64;
                    oi += 1;
                    if gov == 0.0 {
                        continue;
                    }
                    gb_acc += gov;
                    for ci in 0..cin {
                        let xb = ci * x_ch;
                        let wb = w_co + ci * w_ch;
                        for kz in kz0..kz1 {
                            let iz = (z0 + kz as i64) as usize;
                            let xz = xb + iz * ih * iw;
                            let wz = wb + kz * g.k[1] * g.k[2];
                            for ky in ky0..ky1 {
                                let iy = (y0 + ky as i64) as usize;
                                let xr = (xz + iy * iw) as i64 + x0;
                                let wr = wz + ky * g.k[2];
                                for kx in kx0..kx1 {
                                    let xi = (xr + kx as i64) as usize;
                                    gx[xi] += (gov * w[wr + kx] as f64) as f32;
                                    gw[wr + kx] += (gov * x[xi] as f64) as f32;
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(gb) = gb.as_deref_mut() {
            gb[co] += gb_acc as f32;
        }
    }
    Ok(())
}

// ── Pooling ───────────────────────────────────────────────────────────

fn check_pool_shapes(x_shape: &[usize], spec: &ConvSpec) -> Result<()> {
    let r = spec.spatial_rank();
    if x_shape.len() != r + 1 {
        return Err(TensorError::Other(format!(
            "pool input must be [channels, {r} spatial dims], got shape {x_shape:?}"
        )));
    }
    Ok(())
}

/// Max pooling. Also returns, per output element, the flat input index of
/// the winning element (first in row-major scan order on ties) — consumed
/// by the backward pass. Requires `pad < kernel` per dim so each window
/// overlaps the input.
pub fn max_pool_forward(
    x: &[f32],
    x_shape: &[usize],
    spec: &ConvSpec,
) -> Result<(Vec<f32>, Vec<usize>, Vec<usize>)> {
    check_pool_shapes(x_shape, spec)?;
    for d in 0..spec.spatial_rank() {
        if spec.pad[d] >= spec.kernel[d] {
            return Err(TensorError::Other(format!(
                "max pool pad {} must be smaller than kernel {} in dim {d}",
                spec.pad[d], spec.kernel[d]
            )));
        }
    }
    let c = x_shape[0];
    let g = promote(&x_shape[1..], spec)?;
    let [_, ih, iw] = g.ext;
    let [od, oh, ow] = g.out;
    let x_ch = g.ext[0] * ih * iw;
    let mut out = Vec::with_capacity(c * od * oh * ow);
    let mut arg = Vec::with_capacity(c * od * oh * ow);
    for ci in 0..c {
        let xb = ci * x_ch;
        for oz in 0..od {
            let (kz0, kz1, z0) = kernel_range(oz, g.s[0], g.p[0], g.k[0], g.ext[0]);
            for oy in 0..oh {
                let (ky0, ky1, y0) = kernel_range(oy, g.s[1], g.p[1], g.k[1], ih);
                for ox in 0..ow {
                    let (kx0, kx1, x0) = kernel_range(ox, g.s[2], g.p[2], g.k[2], iw);
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for kz in kz0..kz1 {
                        let iz = (z0 + kz as i64) as usize;
                        for ky in ky0..ky1 {
                            let iy = (y0 + ky as i64) as usize;
                            let row = (xb + iz * ih * iw + iy * iw) as i64 + x0;
                            for kx in kx0..kx1 {
                                let xi = (row + kx as i64) as usize;
                                if x[xi] > best {
                                    best = x[xi];
                                    best_i = xi;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    let mut out_shape = vec![c];
    out_shape.extend(spec.out_shape(&x_shape[1..])?);
    Ok((out, out_shape, arg))
}

/// Routes each output gradient to its argmax input position.
pub fn max_pool_backward(arg: &[usize], gy: &[f32], gx: &mut [f32]) {
    for (&i, &g) in arg.iter().zip(gy) {
        gx[i] += g;
    }
}

/// Average pooling. The divisor is the full kernel volume: padded positions
/// count as zeros, matching the zero-padding convention of conv.
pub fn avg_pool_forward(
    x: &[f32],
    x_shape: &[usize],
    spec: &ConvSpec,
) -> Result<(Vec<f32>, Vec<usize>)> {
    check_pool_shapes(x_shape, spec)?;
    let c = x_shape[0];
    let g = promote(&x_shape[1..], spec)?;
    let [_, ih, iw] = g.ext;
    let [od, oh, ow] = g.out;
    let x_ch = g.ext[0] * ih * iw;
    let vol = (g.k[0] * g.k[1] * g.k[2]) as f64;
    let mut out = Vec::with_capacity(c * od * oh * ow);
    for ci in 0..c {
        let xb = ci * x_ch;
        for oz in 0..od {
            let (kz0, kz1, z0) = kernel_range(oz, g.s[0], g.p[0], g.k[0], g.ext[0]);
            for oy in 0..oh {
                let (ky0, ky1, y0) = kernel_range(oy, g.s[1], g.p[1], g.k[1], ih);
                for ox in 0..ow {
                    let (kx0, kx1, x0) = kernel_range(ox, g.s[2], g.p[2], g.k[2], iw);
                    let mut acc = 0f64;
                    for kz in kz0..kz1 {
                        let iz = (z0 + kz as i64) as usize;
                        for ky in ky0..ky1 {
                            let iy = (y0 + ky as i64) as usize;
                            let row = (xb + iz * ih * iw + iy * iw) as i64 + x0;
                            for kx in kx0..kx1 {
                                acc += x[(row + kx as i64) as usize] as f64;
                            }
                        }
                    }
                    out.push((acc / vol) as f32);
                }
            }
        }
    }
    let mut out_shape = vec![c];
    out_shape.extend(spec.out_shape(&x_shape[1..])?);
    Ok((out, out_shape))
}

pub fn avg_pool_backward(
    x_shape: &[usize],
    spec: &ConvSpec,
    gy: &[f32],
    gx: &mut [f32],
) -> Result<()> {
    check_pool_shapes(x_shape, spec)?;
    let c = x_shape[0];
    let g = promote(&x_shape[1..], spec)?;
    let [_, ih, iw] = g.ext;
    let [od, oh, ow] = g.out;
    let x_ch = g.ext[0] * ih * iw;
    let vol = (g.k[0] * g.k[1] * g.k[2]) as f64;
    let mut oi = 0usize;
    for ci in 0..c {
        let xb = ci * x_ch;
        for oz in 0..od {
            let (kz0, kz1, z0) = kernel_range(oz, g.s[0], g.p[0], g.k[0], g.ext[0]);
            for oy in 0..oh {
                let (ky0, ky1, y0) = kernel_range(oy, g.s[1], g.p[1], g.k[1], ih);
                for ox in 0..ow {
                    let (kx0, kx1, x0) = kernel_range(ox, g.s[2], g.p[2], g.k[2], iw);
                    let share = (gy[oi] as f64 / vol) as f32;
                    oi += 1;
                    for kz in kz0..kz1 {
                        let iz = (z0 + kz as i64) as usize;
                        for ky in ky0..ky1 {
                            let iy = (y0 + ky as i64) as usize;
                            let row = (xb + iz * ih * iw + iy * iw) as i64 + x0;
                            for kx in kx0..kx1 {
                                gx[(row + kx as i64) as usize] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// `[C, spatial…]` → `[C]`: mean over all spatial positions per channel.
pub fn global_avg_pool_forward(x: &[f32], x_shape: &[usize]) -> Result<(Vec<f32>, Vec<usize>)> {
    if x_shape.len() < 2 {
        return Err(TensorError::Other(format!(
            "global avg pool needs [channels, spatial…], got shape {x_shape:?}"
        )));
    }
    let c = x_shape[0];
    let sp: usize = x_shape[1..].iter().product();
    let mut out = Vec::with_capacity(c);
    for ci in 0..c {
        let mut acc = 0f64;
        for v in &x[ci * sp..(ci + 1) * sp] {
            acc += *v as f64;
        }
        out.push((acc / sp as f64) as f32);
    }
    Ok((out, vec![c]))
}

pub fn global_avg_pool_backward(x_shape: &[usize], gy: &[f32], gx: &mut [f32]) {
    let sp: usize = x_shape[1..].iter().product();
    for (ci, &g) in gy.iter().enumerate() {
        let share = (g as f64 / sp as f64) as f32;
        for v in &mut gx[ci * sp..(ci + 1) * sp] {
            *v += share;
        }
    }
}

// ── Tests ─────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// Independent oracle: textbook n-d convolution via coordinate vectors,
    /// no promotion, no hoisted bounds. Deliberately slow and different.
    fn oracle_conv(
        x: &[f32],
        x_shape: &[usize],
        w: &[f32],
        w_shape: &[usize],
        bias: Option<&[f32]>,
        spec: &ConvSpec,
    ) -> (Vec<f32>, Vec<usize>) {
        let r = spec.spatial_rank();
        let (cin, cout) = (x_shape[0], w_shape[0]);
        let out_sp = spec.out_shape(&x_shape[1..]).unwrap();
        let x_strides = crate::tensor::strides_of(x_shape);
        let w_strides = crate::tensor::strides_of(w_shape);
        let mut out = Vec::new();
        let mut o = vec![0usize; r];
        'outer: for co in 0..cout {
            o.iter_mut().for_each(|v| *v = 0);
            loop {
                let mut acc = bias.map_or(0f64, |b| b[co] as f64);
                let mut k = vec![0usize; r];
                'kern: for ci in 0..cin {
                    k.iter_mut().for_each(|v| *v = 0);
                    loop {
                        let mut xi = ci * x_strides[0];
                        let mut wi = co * w_strides[0] + ci * w_strides[1];
                        let mut valid = true;
                        for d in 0..r {
                            let pos = o[d] as i64 * spec.stride[d] as i64 - spec.pad[d] as i64
                                + k[d] as i64;
                            if pos < 0 || pos >= x_shape[1 + d] as i64 {
                                valid = false;
                                break;
                            }
                            xi += pos as usize * x_strides[1 + d];
                            wi += k[d] * w_strides[2 + d];
                        }
                        if valid {
                            acc += x[xi] as f64 * w[wi] as f64;
                        }
                        // odometer over kernel coords
                        let mut d = r;
                        loop {
                            if d == 0 {
                                if ci + 1 == cin {
                                    break 'kern;
                                }
                                continue 'kern;
                            }
                            d -= 1;
                            k[d] += 1;
                            if k[d] < spec.kernel[d] {
                                break;
                            }
                            k[d] = 0;
                        }
                    }
                }
                out.push(acc as f32);
                // odometer over output coords
                let mut d = r;
                loop {
                    if d == 0 {
                        if co + 1 == cout {
                            break 'outer;
                        }
                        break;
                    }
                    d -= 1;
                    o[d] += 1;
                    if o[d] < out_sp[d] {
                        break;
                    }
                    o[d] = 0;
                }
                if o.iter().all(|&v| v == 0) {
                    break;
                }
            }
        }
        let mut shape = vec![cout];
        shape.extend(out_sp);
        (out, shape)
    }

    fn rand_buf(rng: &mut impl Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn shape_formula_examples() {
        // 2-D: 64 input, k3 s2 p1 → 32; 3-D depth 16 k3 s2 p1 → 8.
        let s = ConvSpec::isotropic(2, 3, 2, 1).unwrap();
        assert_eq!(s.out_shape(&[64, 64]).unwrap(), vec![32, 32]);
        let s = ConvSpec::isotropic(3, 3, 2, 1).unwrap();
        assert_eq!(s.out_shape(&[16, 64, 64]).unwrap(), vec![8, 32, 32]);
        // Too-small input reports the offending dim.
        let s = ConvSpec::isotropic(3, 3, 2, 0).unwrap();
        let err = s.out_shape(&[1, 64, 64]).unwrap_err();
        match err {
            TensorError::OutputTooSmall { dim, input, kernel, .. } => {
                assert_eq!((dim, input, kernel), (0, 1, 3));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        // 1×1 kernel, stride 1, identity weight = input copy.
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let spec = ConvSpec::isotropic(2, 1, 1, 0).unwrap();
        let (y, ys) = conv_forward(&x, &[1, 3, 3], &[1.0], &[1, 1, 1, 1], None, &spec).unwrap();
        assert_eq!(ys, vec![1, 3, 3]);
        assert_eq!(y, x);
    }

    #[test]
    fn known_small_conv() {
        // 1 channel 3×3 input, 2×2 ones kernel, stride 1 → window sums.
        let x = vec![1., 2., 3., 4., 5., 6., 7., 8., 9.];
        let w = vec![1.0f32; 4];
        let spec = ConvSpec::isotropic(2, 2, 1, 0).unwrap();
        let (y, ys) = conv_forward(&x, &[1, 3, 3], &w, &[1, 1, 2, 2], Some(&[0.5]), &spec).unwrap();
        assert_eq!(ys, vec![1, 2, 2]);
        assert_eq!(y, vec![12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn matches_oracle_2d_and_3d() {
        let mut rng = rng::stream(11, &[0xC0]);
        for case in 0..40 {
            let three_d = case % 2 == 0;
            let r = if three_d { 3 } else { 2 };
            let cin = rng.gen_range(1..3usize);
            let cout = rng.gen_range(1..3usize);
            let spec = ConvSpec::new(
                (0..r).map(|_| rng.gen_range(1..4usize)).collect(),
                (0..r).map(|_| rng.gen_range(1..3usize)).collect(),
                (0..r).map(|_| rng.gen_range(0..3usize)).collect(),
            )
            .unwrap();
            let in_sp: Vec<usize> = (0..r)
                .map(|d| rng.gen_range(spec.kernel[d].saturating_sub(2 * spec.pad[d]).max(1)..8))
                .collect();
            if spec.out_shape(&in_sp).is_err() {
                continue;
            }
            let mut x_shape = vec![cin];
            x_shape.extend(&in_sp);
            let mut w_shape = vec![cout, cin];
            w_shape.extend(&spec.kernel);
            let x = rand_buf(&mut rng, x_shape.iter().product());
            let w = rand_buf(&mut rng, w_shape.iter().product());
            let b = rand_buf(&mut rng, cout);
            let (fast, fs) = conv_forward(&x, &x_shape, &w, &w_shape, Some(&b), &spec).unwrap();
            let (slow, ss) = oracle_conv(&x, &x_shape, &w, &w_shape, Some(&b), &spec);
            assert_eq!(fs, ss, "shape mismatch case {case}");
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-5, "case {case}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn max_pool_values_and_argmax() {
        // 1×4×4, 2×2 stride 2.
        let x: Vec<f32> = vec![
            1., 9., 2., 3., //
            4., 5., 6., 7., //
            8., 0., 1., 2., //
            3., 4., 5., 6.,
        ];
        let spec = ConvSpec::isotropic(2, 2, 2, 0).unwrap();
        let (y, ys, arg) = max_pool_forward(&x, &[1, 4, 4], &spec).unwrap();
        assert_eq!(ys, vec![1, 2, 2]);
        assert_eq!(y, vec![9., 7., 8., 6.]);
        assert_eq!(arg, vec![1, 7, 8, 15]);
        let mut gx = vec![0f32; 16];
        max_pool_backward(&arg, &[1., 1., 1., 1.], &mut gx);
        assert_eq!(gx.iter().sum::<f32>(), 4.0);
        assert_eq!(gx[1], 1.0);
    }

    #[test]
    fn max_pool_tie_takes_first_in_scan_order() {
        let x = vec![5.0f32, 5.0, 5.0, 5.0];
        let spec = ConvSpec::isotropic(2, 2, 2, 0).unwrap();
        let (_, _, arg) = max_pool_forward(&x, &[1, 2, 2], &spec).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn avg_pool_divides_by_full_window() {
        // With pad 1 the corner window holds 1 real value and 3 pad zeros.
        let x = vec![4.0f32];
        let spec = ConvSpec::isotropic(2, 2, 2, 1).unwrap();
        let (y, ys) = avg_pool_forward(&x, &[1, 1, 1], &spec).unwrap();
        assert_eq!(ys, vec![1, 1, 1]);
        assert_eq!(y, vec![1.0]);
    }

    #[test]
    fn global_avg_pool_means() {
        let x = vec![1., 2., 3., 4., 10., 20., 30., 40.];
        let (y, ys) = global_avg_pool_forward(&x, &[2, 2, 2]).unwrap();
        assert_eq!(ys, vec![2]);
        assert_eq!(y, vec![2.5, 25.0]);
        let mut gx = vec![0f32; 8];
        global_avg_pool_backward(&[2, 2, 2], &[4.0, 8.0], &mut gx);
        assert_eq!(gx, vec![1., 1., 1., 1., 2., 2., 2., 2.]);
    }

    #[test]
    fn pool_rejects_pad_not_below_kernel() {
        let spec = ConvSpec::isotropic(2, 2, 2, 2).unwrap();
        assert!(max_pool_forward(&[0.0; 4], &[1, 2, 2], &spec).is_err());
    }
}
