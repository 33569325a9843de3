//! Convolution and pointwise kernels.
//!
//! The grouped 1x1 kernel reads its input from a [`ChannelStack`]: a list of
//! views whose channels are concatenated logically. Shifted views (address
//! shift) and channel-shifted views are read in place, which is how the
//! fused enhanced group convolution embeds both shifts without copies.

use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shift::{self, check_output, ChannelShiftSpec, ShiftDirection};
use crate::tensor::{Dims, Element, TensorView};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enables rayon parallelism over output planes in the convolution kernels.
/// Results are bit-identical either way; each plane is reduced in the same
/// order by one thread.
pub fn set_parallel_kernels(on: bool) {
    PARALLEL.store(on, Ordering::SeqCst);
}

pub fn parallel_kernels() -> bool {
    PARALLEL.load(Ordering::SeqCst)
}

fn for_each_plane<T: Element>(out: &mut [T], plane: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if parallel_kernels() {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    } else {
        out.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

/// Weights and layout of a (grouped) convolution.
#[derive(Clone, Debug)]
pub struct GroupConvParams<T: Element> {
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `(C_out, C_in / G, k, k)`.
    pub weight: TensorView<T>,
    /// `(1, C_out, 1, 1)`.
    pub bias: Option<TensorView<T>>,
}

impl<T: Element> GroupConvParams<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        groups: usize,
        kernel: usize,
        stride: usize,
        weights: Vec<T>,
        bias: Option<Vec<T>>,
    ) -> Result<Self> {
        if groups == 0 || !c_in.is_multiple_of(groups) {
            return Err(Error::NotDivisible {
                what: "c_in",
                value: c_in,
                by: groups,
            });
        }
        if !c_out.is_multiple_of(groups) {
            return Err(Error::NotDivisible {
                what: "c_out",
                value: c_out,
                by: groups,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidStride(stride));
        }
        if kernel != 1 && kernel != 3 {
            return Err(Error::InvalidArgument(format!("unsupported kernel size {kernel}")));
        }
        let weight = TensorView::from_vec(Dims::new(c_out, c_in / groups, kernel, kernel)?, weights, 1)?;
        let bias = bias
            .map(|b| TensorView::from_vec(Dims::new(1, c_out, 1, 1)?, b, 1))
            .transpose()?;
        Ok(Self {
            c_in,
            c_out,
            groups,
            kernel,
            stride,
            weight,
            bias,
        })
    }

    /// He initialisation: zero-mean Gaussian with variance `2 / fan_in`.
    pub fn msra<R: Rng>(
        c_in: usize,
        c_out: usize,
        groups: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (c_in / groups.max(1)).max(1) * kernel * kernel;
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let count = c_out * (c_in / groups.max(1)) * kernel * kernel;
        let weights = (0..count).map(|_| T::lit(dist.sample(rng))).collect();
        Self::new(c_in, c_out, groups, kernel, stride, weights, None)
    }

    pub fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn out_dims(&self, input: Dims) -> Dims {
        Dims {
            n: input.n,
            c: self.c_out,
            h: input.h.div_ceil(self.stride),
            w: input.w.div_ceil(self.stride),
        }
    }

    pub fn weight_count(&self) -> usize {
        self.weight.numel()
    }

    /// Multiply-adds for one image: `C_out * (C_in/G) * k^2 * H_out * W_out`.
    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        (self.c_out * self.in_per_group() * self.kernel * self.kernel * h_out * w_out) as u64
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormParams<T: Element> {
    pub gamma: TensorView<T>,
    pub beta: TensorView<T>,
    pub running_mean: TensorView<T>,
    pub running_var: TensorView<T>,
    pub eps: f64,
}

pub const BN_EPS: f64 = 1e-5;

impl<T: Element> BatchNormParams<T> {
    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn identity(channels: usize) -> Result<Self> {
        Self::new(
            vec![T::one(); channels],
            vec![T::zero(); channels],
            vec![T::zero(); channels],
            vec![T::one(); channels],
            BN_EPS,
        )
    }

    pub fn new(gamma: Vec<T>, beta: Vec<T>, mean: Vec<T>, var: Vec<T>, eps: f64) -> Result<Self> {
        let c = gamma.len();
        if [beta.len(), mean.len(), var.len()].iter().any(|&l| l != c) {
            return Err(Error::InvalidArgument("batch norm vectors differ in length".into()));
        }
        if var.iter().any(|v| *v < T::zero()) || eps <= 0.0 {
            return Err(Error::InvalidArgument(
                "batch norm variance must be >= 0, eps > 0".into(),
            ));
        }
        let d = Dims::new(1, c, 1, 1)?;
        Ok(Self {
            gamma: TensorView::from_vec(d, gamma, 1)?,
            beta: TensorView::from_vec(d, beta, 1)?,
            running_mean: TensorView::from_vec(d, mean, 1)?,
            running_var: TensorView::from_vec(d, var, 1)?,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.dims().c
    }

    /// Per-channel `(scale, shift)` with `y = scale * x + shift` at inference.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        let (g, b) = (self.gamma.to_vec(), self.beta.to_vec());
        let (m, v) = (self.running_mean.to_vec(), self.running_var.to_vec());
        let eps = T::lit(self.eps);
        let scale: Vec<T> = g.iter().zip(&v).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
        let shift = b.iter().zip(&m).zip(&scale).map(|((&b, &m), &s)| b - m * s).collect();
        (scale, shift)
    }
}

/// Channel shift amount plus the per-group address shift of the enhanced
/// group convolution. Groups 0..4 shift left, up, right, down: the two
/// forward offsets first, the two backward offsets last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedEnhancedSpec {
    /// `None` reads the group unshifted (test hook).
    pub directions: [Option<ShiftDirection>; 4],
    pub shift_channels: usize,
}

impl FusedEnhancedSpec {
    pub const GROUPS: usize = 4;
    pub const DIRECTIONS: [ShiftDirection; 4] = [
        ShiftDirection::Left,
        ShiftDirection::Up,
        ShiftDirection::Right,
        ShiftDirection::Down,
    ];

    pub fn for_channels(channels: usize) -> Result<Self> {
        let cs = ChannelShiftSpec::new(channels, Self::GROUPS)?;
        Ok(Self {
            directions: Self::DIRECTIONS.map(Some),
            shift_channels: cs.shift_channels,
        })
    }

    pub fn unshifted() -> Self {
        Self {
            directions: [None; 4],
            shift_channels: 0,
        }
    }
}

/// Views concatenated along the channel axis without copying.
#[derive(Clone, Debug)]
pub struct ChannelStack<T: Element> {
    parts: Vec<TensorView<T>>,
    dims: Dims,
}

impl<T: Element> ChannelStack<T> {
    pub fn new(parts: Vec<TensorView<T>>) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty channel stack".into()))?
            .dims();
        let mut c = 0;
        for p in &parts {
            let d = p.dims();
            if (d.n, d.h, d.w) != (first.n, first.h, first.w) {
                return Err(Error::ShapeMismatch {
                    op: "channel_stack",
                    expected: first.to_vec(),
                    got: d.to_vec(),
                });
            }
            if !p.is_row_major() {
                return Err(Error::NotDense { op: "channel_stack" });
            }
            c += d.c;
        }
        Ok(Self {
            parts,
            dims: first.with_channels(c),
        })
    }

    pub fn single(view: &TensorView<T>) -> Result<Self> {
        Self::new(vec![view.clone()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn parts(&self) -> &[TensorView<T>] {
        &self.parts
    }

    /// `(part, local channel)` for every stacked channel.
    pub fn channel_map(&self) -> Vec<(usize, usize)> {
        self.parts
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..p.dims().c).map(move |c| (i, c)))
            .collect()
    }

    /// Logical contents in NCHW order (read through every part's offsets).
    pub fn to_vec(&self) -> Vec<T> {
        let d = self.dims;
        let contents: Vec<Vec<T>> = self.parts.iter().map(|p| p.to_vec()).collect();
        let mut out = Vec::with_capacity(d.numel());
        for n in 0..d.n {
            for (p, v) in self.parts.iter().zip(&contents) {
                let image = p.dims().image();
                out.extend_from_slice(&v[n * image..(n + 1) * image]);
            }
        }
        out
    }
}

/// Grouped 1x1 convolution over a channel stack, returned as a dense NCHW
/// vector. Every input plane is read in place from its buffer.
fn pointwise<T: Element>(input: &ChannelStack<T>, p: &GroupConvParams<T>) -> Result<Vec<T>> {
    let d = input.dims();
    if d.c != p.c_in {
        return Err(Error::ShapeMismatch {
            op: "conv1x1_group",
            expected: vec![p.c_in],
            got: vec![d.c],
        });
    }
    if p.kernel != 1 {
        return Err(Error::InvalidArgument("pointwise kernel needs k = 1".into()));
    }
    let od = p.out_dims(d);
    let weights = p.weight.to_vec();
    let bias = p.bias.as_ref().map(|b| b.to_vec());
    let reads: Vec<_> = input.parts().iter().map(|v| v.buffer().read()).collect();
    let channels = input.channel_map();
    let (cig, cog, s) = (p.in_per_group(), p.out_per_group(), p.stride);
    let (h, w, ho, wo) = (d.h, d.w, od.h, od.w);
    let plane_out = ho * wo;
    let mut out = vec![T::zero(); od.numel()];
    for_each_plane(&mut out, plane_out, |idx, acc| {
        let (n, oc) = (idx / p.c_out, idx % p.c_out);
        let g = oc / cog;
        let b = bias.as_ref().map_or(T::zero(), |b| b[oc]);
        acc.iter_mut().for_each(|a| *a = b);
        for j in 0..cig {
            let wgt = weights[oc * cig + j];
            let (part, local) = channels[g * cig + j];
            let view = &input.parts()[part];
            let plane = reads[part].run(view.plane_start(n, local), h * w);
            if s == 1 {
                for (a, &x) in acc.iter_mut().zip(plane) {
                    *a += wgt * x;
                }
            } else {
                for y in 0..ho {
                    let row = &plane[y * s * w..];
                    for x in 0..wo {
                        acc[y * wo + x] += wgt * row[x * s];
                    }
                }
            }
        }
    });
    Ok(out)
}

pub fn conv1x1_group_stack_into<T: Element>(
    input: &ChannelStack<T>,
    p: &GroupConvParams<T>,
    out: &TensorView<T>,
) -> Result<()> {
    let od = p.out_dims(input.dims());
    let refs: Vec<&TensorView<T>> = input.parts().iter().collect();
    check_output("conv1x1_group", out, od, &refs)?;
    out.write_dense(&pointwise(input, p)?)
}

pub fn conv1x1_group_stack<T: Element>(input: &ChannelStack<T>, p: &GroupConvParams<T>) -> Result<TensorView<T>> {
    let out = TensorView::alloc(p.out_dims(input.dims()), 1)?;
    conv1x1_group_stack_into(input, p, &out)?;
    Ok(out)
}

/// Grouped 1x1 convolution. Stride 2 keeps even positions (top-left aligned).
pub fn conv1x1_group<T: Element>(t: &TensorView<T>, p: &GroupConvParams<T>) -> Result<TensorView<T>> {
    conv1x1_group_stack(&ChannelStack::single(t)?, p)
}

pub fn conv1x1_group_into<T: Element>(t: &TensorView<T>, p: &GroupConvParams<T>, out: &TensorView<T>) -> Result<()> {
    conv1x1_group_stack_into(&ChannelStack::single(t)?, p, out)
}

/// Dense 3x3 convolution, zero padding 1 (stem layer).
pub fn conv3x3_into<T: Element>(t: &TensorView<T>, p: &GroupConvParams<T>, out: &TensorView<T>) -> Result<()> {
    let d = t.dims();
    if p.kernel != 3 || p.groups != 1 {
        return Err(Error::InvalidArgument("conv3x3 needs k = 3 and G = 1".into()));
    }
    if d.c != p.c_in {
        return Err(Error::ShapeMismatch {
            op: "conv3x3",
            expected: vec![p.c_in],
            got: vec![d.c],
        });
    }
    let od = p.out_dims(d);
    check_output("conv3x3", out, od, &[t])?;
    let x = t.to_vec();
    let weights = p.weight.to_vec();
    let bias = p.bias.as_ref().map(|b| b.to_vec());
    let (h, w, s) = (d.h as isize, d.w as isize, p.stride as isize);
    let (ho, wo) = (od.h, od.w);
    let mut values = vec![T::zero(); od.numel()];
    for_each_plane(&mut values, ho * wo, |idx, acc| {
        let (n, oc) = (idx / p.c_out, idx % p.c_out);
        let b = bias.as_ref().map_or(T::zero(), |b| b[oc]);
        acc.iter_mut().for_each(|a| *a = b);
        for ic in 0..d.c {
            let plane = &x[(n * d.c + ic) * d.plane()..][..d.plane()];
            let k = &weights[(oc * d.c + ic) * 9..][..9];
            for y in 0..ho {
                for xo in 0..wo {
                    let mut sum = T::zero();
                    for ky in 0..3 {
                        let sy = y as isize * s + ky - 1;
                        if !(0..h).contains(&sy) {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xo as isize * s + kx - 1;
                            if (0..w).contains(&sx) {
                                sum += k[(ky * 3 + kx) as usize] * plane[(sy * w + sx) as usize];
                            }
                        }
                    }
                    acc[y * wo + xo] += sum;
                }
            }
        }
    });
    out.write_dense(&values)
}

pub fn conv3x3<T: Element>(t: &TensorView<T>, p: &GroupConvParams<T>) -> Result<TensorView<T>> {
    let out = TensorView::alloc(p.out_dims(t.dims()), 1)?;
    conv3x3_into(t, p, &out)?;
    Ok(out)
}

/// The four per-group address-shifted views of a channel-shifted tensor.
pub fn enhanced_segments<T: Element>(shifted: &TensorView<T>, f: &FusedEnhancedSpec) -> Result<ChannelStack<T>> {
    let c = shifted.dims().c;
    if !c.is_multiple_of(FusedEnhancedSpec::GROUPS) {
        return Err(Error::NotDivisible {
            what: "channels",
            value: c,
            by: FusedEnhancedSpec::GROUPS,
        });
    }
    let cg = c / FusedEnhancedSpec::GROUPS;
    let parts = f
        .directions
        .iter()
        .enumerate()
        .map(|(g, dir)| {
            let slice = shifted.slice_channels(g * cg, (g + 1) * cg)?;
            match dir {
                Some(d) => shift::address_shift(&slice, *d),
                None => Ok(slice),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ChannelStack::new(parts)
}

fn check_fused<T: Element>(t: &TensorView<T>, p: &GroupConvParams<T>) -> Result<()> {
    if p.groups != FusedEnhancedSpec::GROUPS {
        return Err(Error::InvalidConfig(format!(
            "enhanced group convolution needs G = 4, got {}",
            p.groups
        )));
    }
    if t.dims().c != p.c_in {
        return Err(Error::ShapeMismatch {
            op: "fused_enhanced_gconv",
            expected: vec![p.c_in],
            got: vec![t.dims().c],
        });
    }
    Ok(())
}

/// Channel shift, per-group address shift and grouped 1x1 convolution in a
/// single pass. Only the half-group copy of the channel shift and the output
/// write move data. `t` must have reserve space for the channel shift.
pub fn fused_enhanced_gconv_into<T: Element>(
    t: &TensorView<T>,
    p: &GroupConvParams<T>,
    f: &FusedEnhancedSpec,
    out: &TensorView<T>,
) -> Result<()> {
    check_fused(t, p)?;
    let shifted = shift::channel_shift(t, ChannelShiftSpec::with_shift(p.groups, f.shift_channels))?;
    conv1x1_group_stack_into(&enhanced_segments(&shifted, f)?, p, out)
}

pub fn fused_enhanced_gconv<T: Element>(
    t: &TensorView<T>,
    p: &GroupConvParams<T>,
    f: &FusedEnhancedSpec,
) -> Result<TensorView<T>> {
    let out = TensorView::alloc(p.out_dims(t.dims()), 1)?;
    fused_enhanced_gconv_into(t, p, f, &out)?;
    Ok(out)
}

/// The unfused pipeline: channel shift, then each group's address-shifted
/// view materialized into a concatenation arena, then a plain grouped 1x1
/// convolution.
pub fn composed_enhanced_reference<T: Element>(
    t: &TensorView<T>,
    p: &GroupConvParams<T>,
    f: &FusedEnhancedSpec,
) -> Result<TensorView<T>> {
    check_fused(t, p)?;
    let d = t.dims();
    let shifted = shift::channel_shift(t, ChannelShiftSpec::with_shift(p.groups, f.shift_channels))?;
    let segments = enhanced_segments(&shifted, f)?;
    let cg = d.c / FusedEnhancedSpec::GROUPS;
    let arena = shift::arena_plan::<T>(d.n, d.h, d.w, &[cg; 4])?;
    for (i, part) in segments.parts().iter().enumerate() {
        arena.slot(i)?.write_dense(&part.to_vec())?;
    }
    conv1x1_group(&arena.concat(), p)
}

/// Address-based module shift stage: `groups` channel groups, each split
/// into four equal sub-slices shifted up, down, left, right; channels left
/// over by the split stay unshifted.
pub fn address_stage_segments<T: Element>(t: &TensorView<T>, groups: usize) -> Result<ChannelStack<T>> {
    const ORDER: [ShiftDirection; 4] = [
        ShiftDirection::Up,
        ShiftDirection::Down,
        ShiftDirection::Left,
        ShiftDirection::Right,
    ];
    let c = t.dims().c;
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(Error::NotDivisible {
            what: "channels",
            value: c,
            by: groups,
        });
    }
    let gs = c / groups;
    let sub = gs / 4;
    let mut parts = Vec::new();
    for g in 0..groups {
        let base = g * gs;
        if sub > 0 {
            for (k, dir) in ORDER.iter().enumerate() {
                let slice = t.slice_channels(base + k * sub, base + (k + 1) * sub)?;
                parts.push(shift::address_shift(&slice, *dir)?);
            }
        }
        if 4 * sub < gs {
            parts.push(t.slice_channels(base + 4 * sub, base + gs)?);
        }
    }
    ChannelStack::new(parts)
}

/// Folds inference batch norm into the preceding convolution:
/// `w' = w * gamma / sqrt(var + eps)`, `b' = beta + (b - mean) * gamma / sqrt(var + eps)`.
pub fn fold_bn<T: Element>(p: &GroupConvParams<T>, bn: &BatchNormParams<T>) -> Result<GroupConvParams<T>> {
    if bn.channels() != p.c_out {
        return Err(Error::ShapeMismatch {
            op: "fold_bn",
            expected: vec![p.c_out],
            got: vec![bn.channels()],
        });
    }
    let (scale, shift) = bn.affine();
    let per_out = p.weight_count() / p.c_out;
    let weights: Vec<T> = p
        .weight
        .to_vec()
        .into_iter()
        .enumerate()
        .map(|(i, w)| w * scale[i / per_out])
        .collect();
    let old_bias = p.bias.as_ref().map_or(vec![T::zero(); p.c_out], |b| b.to_vec());
    let bias = old_bias
        .iter()
        .zip(&scale)
        .zip(&shift)
        .map(|((&b, &s), &sh)| b * s + sh)
        .collect();
    GroupConvParams::new(p.c_in, p.c_out, p.groups, p.kernel, p.stride, weights, Some(bias))
}

fn check_bn<T: Element>(t: &TensorView<T>, bn: &BatchNormParams<T>) -> Result<()> {
    if t.dims().c != bn.channels() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            expected: vec![bn.channels()],
            got: vec![t.dims().c],
        });
    }
    Ok(())
}

fn apply_affine<T: Element>(x: &[T], d: Dims, scale: &[T], shift: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for (i, plane) in x.chunks(d.plane()).enumerate() {
        let (a, b) = (scale[i % d.c], shift[i % d.c]);
        out.extend(plane.iter().map(|&v| v * a + b));
    }
    out
}

pub fn batchnorm_infer_into<T: Element>(t: &TensorView<T>, bn: &BatchNormParams<T>, out: &TensorView<T>) -> Result<()> {
    check_bn(t, bn)?;
    check_output("batchnorm_infer", out, t.dims(), &[t])?;
    let (scale, shift) = bn.affine();
    out.write_dense(&apply_affine(&t.to_vec(), t.dims(), &scale, &shift))
}

pub fn batchnorm_infer<T: Element>(t: &TensorView<T>, bn: &BatchNormParams<T>) -> Result<TensorView<T>> {
    let out = TensorView::alloc(t.dims(), 1)?;
    batchnorm_infer_into(t, bn, &out)?;
    Ok(out)
}

/// Per-channel statistics of one batch; variance is the biased (1/M) one.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn batch_stats<T: Element>(x: &[T], d: Dims, eps: f64) -> BatchStats<T> {
    let m = T::lit((d.n * d.plane()) as f64);
    let mut mean = vec![T::zero(); d.c];
    let mut var = vec![T::zero(); d.c];
    for (i, plane) in x.chunks(d.plane()).enumerate() {
        mean[i % d.c] += plane.iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|s| *s = *s / m);
    for (i, plane) in x.chunks(d.plane()).enumerate() {
        let mu = mean[i % d.c];
        var[i % d.c] += plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
    }
    var.iter_mut().for_each(|s| *s = *s / m);
    let eps = T::lit(eps);
    let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    BatchStats { mean, var, inv_std }
}

/// Training-mode batch norm: normalizes with the batch's own statistics and
/// moves the running statistics toward them,
/// `running = (1 - momentum) * running + momentum * batch`.
pub fn batchnorm_train_into<T: Element>(
    t: &TensorView<T>,
    bn: &BatchNormParams<T>,
    momentum: f64,
    out: &TensorView<T>,
) -> Result<BatchStats<T>> {
    check_bn(t, bn)?;
    check_output("batchnorm_train", out, t.dims(), &[t])?;
    let d = t.dims();
    let x = t.to_vec();
    let stats = batch_stats(&x, d, bn.eps);
    let (g, b) = (bn.gamma.to_vec(), bn.beta.to_vec());
    let scale: Vec<T> = g.iter().zip(&stats.inv_std).map(|(&g, &i)| g * i).collect();
    let shift: Vec<T> = b
        .iter()
        .zip(&stats.mean)
        .zip(&scale)
        .map(|((&b, &m), &s)| b - m * s)
        .collect();
    out.write_dense(&apply_affine(&x, d, &scale, &shift))?;
    let m = T::lit(momentum);
    let keep = T::one() - m;
    bn.running_mean.update(|c, r| keep * r + m * stats.mean[c]);
    bn.running_var.update(|c, r| keep * r + m * stats.var[c]);
    Ok(stats)
}

pub fn batchnorm_train<T: Element>(t: &TensorView<T>, bn: &BatchNormParams<T>, momentum: f64) -> Result<TensorView<T>> {
    let out = TensorView::alloc(t.dims(), 1)?;
    batchnorm_train_into(t, bn, momentum, &out)?;
    Ok(out)
}

pub fn relu_into<T: Element>(t: &TensorView<T>, out: &TensorView<T>) -> Result<()> {
    check_output("relu", out, t.dims(), &[t])?;
    let v: Vec<T> = t.to_vec().into_iter().map(|x| x.max(T::zero())).collect();
    out.write_dense(&v)
}

pub fn relu<T: Element>(t: &TensorView<T>) -> Result<TensorView<T>> {
    let out = TensorView::alloc(t.dims(), 1)?;
    relu_into(t, &out)?;
    Ok(out)
}

pub fn avg_pool_dims(d: Dims, k: usize, stride: usize) -> Result<Dims> {
    if k == 0 || stride == 0 || k > d.h || k > d.w {
        return Err(Error::InvalidArgument(format!("avg_pool k={k} stride={stride} on {d}")));
    }
    Ok(Dims {
        h: (d.h - k) / stride + 1,
        w: (d.w - k) / stride + 1,
        ..d
    })
}

/// Unpadded `k x k` average pooling.
pub fn avg_pool_into<T: Element>(t: &TensorView<T>, k: usize, stride: usize, out: &TensorView<T>) -> Result<()> {
    let d = t.dims();
    let od = avg_pool_dims(d, k, stride)?;
    check_output("avg_pool", out, od, &[t])?;
    let x = t.to_vec();
    let inv = T::one() / T::lit((k * k) as f64);
    let mut values = Vec::with_capacity(od.numel());
    for nc in 0..d.n * d.c {
        let plane = &x[nc * d.plane()..][..d.plane()];
        for y in 0..od.h {
            for xo in 0..od.w {
                let mut sum = T::zero();
                for ky in 0..k {
                    for kx in 0..k {
                        sum += plane[(y * stride + ky) * d.w + xo * stride + kx];
                    }
                }
                values.push(sum * inv);
            }
        }
    }
    out.write_dense(&values)
}

pub fn avg_pool<T: Element>(t: &TensorView<T>, k: usize, stride: usize) -> Result<TensorView<T>> {
    let out = TensorView::alloc(avg_pool_dims(t.dims(), k, stride)?, 1)?;
    avg_pool_into(t, k, stride, &out)?;
    Ok(out)
}

/// `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn global_avg_pool<T: Element>(t: &TensorView<T>) -> Result<TensorView<T>> {
    let d = t.dims();
    let inv = T::one() / T::lit(d.plane() as f64);
    let x = t.to_vec();
    let values: Vec<T> = x
        .chunks(d.plane())
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    let out = TensorView::alloc(Dims { h: 1, w: 1, ..d }, 1)?;
    out.write_dense(&values)?;
    Ok(out)
}

/// `out[n, k] = sum_c weight[k, c] * x[n, c] + bias[k]`, with `x` flattened
/// per image; `weight` is `(K, C*H*W, 1, 1)`.
pub fn fully_connected<T: Element>(
    t: &TensorView<T>,
    weight: &TensorView<T>,
    bias: Option<&TensorView<T>>,
) -> Result<TensorView<T>> {
    let d = t.dims();
    let (k, fan_in) = (weight.dims().n, weight.dims().c * weight.dims().h * weight.dims().w);
    if fan_in != d.image() {
        return Err(Error::ShapeMismatch {
            op: "fully_connected",
            expected: vec![fan_in],
            got: vec![d.image()],
        });
    }
    if let Some(b) = bias {
        if b.numel() != k {
            return Err(Error::ShapeMismatch {
                op: "fully_connected",
                expected: vec![k],
                got: vec![b.numel()],
            });
        }
    }
    let x = t.to_vec();
    let w = weight.to_vec();
    let b = bias.map(|b| b.to_vec());
    let mut values = Vec::with_capacity(d.n * k);
    for n in 0..d.n {
        let row = &x[n * fan_in..][..fan_in];
        for o in 0..k {
            let dot: T = w[o * fan_in..][..fan_in].iter().zip(row).map(|(&a, &b)| a * b).sum();
            values.push(dot + b.as_ref().map_or(T::zero(), |b| b[o]));
        }
    }
    let out = TensorView::alloc(Dims::new(d.n, k, 1, 1)?, 1)?;
    out.write_dense(&values)?;
    Ok(out)
}

/// Mean cross-entropy over the batch and the softmax probabilities
/// (NCHW order, `(N, K, 1, 1)`).
pub fn softmax_cross_entropy<T: Element>(logits: &TensorView<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let d = logits.dims();
    let k = d.image();
    if labels.len() != d.n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            expected: vec![d.n],
            got: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let x = logits.to_vec();
    let mut probs = Vec::with_capacity(x.len());
    let mut loss = T::zero();
    for (n, row) in x.chunks(k).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        loss += z.ln() - (row[labels[n]] - max);
        probs.extend(exps.into_iter().map(|e| e / z));
    }
    Ok((loss / T::lit(d.n as f64), probs))
}
