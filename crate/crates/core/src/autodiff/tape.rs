//! Reverse-mode tape.
//!
//! Gradients are accumulated per buffer position rather than per view. A
//! view-only operation (address shift, slicing, arena concatenation) shares
//! its buffer with its input, so it needs no backward rule: whatever reads
//! the shifted view scatters its gradient to the buffer positions it read.
//! Positions in a guard margin are never written by a recorded operation, so
//! gradient landing there is dropped.

use std::collections::HashMap;

use crate::analyzer::{MoveReport, OpKind};
use crate::conv::{self, BatchNormParams, BatchStats, ChannelStack, FusedEnhancedSpec, GroupConvParams};
use crate::error::{Error, Result};
use crate::shift::{self, ChannelShiftSpec, ConcatArena, ShiftDirection};
use crate::tensor::{BufferId, Dims, Element, TensorView};

enum Entry<T: Element> {
    Pointwise {
        input: ChannelStack<T>,
        params: GroupConvParams<T>,
        output: TensorView<T>,
    },
    Conv3x3 {
        input: TensorView<T>,
        params: GroupConvParams<T>,
        output: TensorView<T>,
    },
    /// Copy of the first `shift` planes of each image into the reserve.
    ChannelShiftCopy {
        input: TensorView<T>,
        shift: usize,
    },
    /// `output[j] = input[map[j]]` (or 0), dense indices.
    Gather {
        input: TensorView<T>,
        map: Vec<Option<usize>>,
        output: TensorView<T>,
    },
    BatchNorm {
        input: TensorView<T>,
        gamma: TensorView<T>,
        beta: TensorView<T>,
        stats: BatchStats<T>,
        output: TensorView<T>,
    },
    Relu {
        input: TensorView<T>,
        output: TensorView<T>,
    },
    AvgPool {
        input: TensorView<T>,
        k: usize,
        stride: usize,
        output: TensorView<T>,
    },
    GlobalAvgPool {
        input: TensorView<T>,
        output: TensorView<T>,
    },
    Linear {
        input: TensorView<T>,
        weight: TensorView<T>,
        bias: Option<TensorView<T>>,
        output: TensorView<T>,
    },
    Add {
        a: TensorView<T>,
        b: TensorView<T>,
        output: TensorView<T>,
    },
    SoftmaxCe {
        logits: TensorView<T>,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    NoBackward {
        op: &'static str,
        output: TensorView<T>,
    },
}

/// Where backward starts.
pub enum Seed<'a, T: Element> {
    /// d(loss)/d(loss) = 1 for the most recent softmax cross-entropy.
    Loss,
    /// Explicit upstream gradient (NCHW order) for a view.
    View(&'a TensorView<T>, &'a [T]),
}

/// Gradient per buffer position, guards included.
#[derive(Default)]
pub struct Gradients<T: Element> {
    bufs: HashMap<BufferId, (usize, Vec<T>)>,
}

impl<T: Element> Gradients<T> {
    fn slot(&mut self, view: &TensorView<T>) -> &mut Vec<T> {
        let b = view.buffer();
        let guard = b.guard();
        let len = b.storage_len();
        &mut self
            .bufs
            .entry(b.id())
            .or_insert_with(|| (guard, vec![T::zero(); len]))
            .1
    }

    /// Gradient for every logical element of `view` (zeros if untouched).
    pub fn wrt(&self, view: &TensorView<T>) -> Vec<T> {
        match self.bufs.get(&view.buffer().id()) {
            Some((guard, g)) => {
                let mut out = Vec::with_capacity(view.numel());
                for (start, len) in runs(view) {
                    let s = (start + *guard as isize) as usize;
                    out.extend_from_slice(&g[s..s + len]);
                }
                out
            }
            None => vec![T::zero(); view.numel()],
        }
    }

    pub fn add_to(&mut self, view: &TensorView<T>, dense: &[T]) {
        let guard = view.buffer().guard() as isize;
        let g = self.slot(view);
        let mut k = 0;
        for (start, len) in runs(view) {
            let s = (start + guard) as usize;
            for (a, &d) in g[s..s + len].iter_mut().zip(&dense[k..k + len]) {
                *a += d;
            }
            k += len;
        }
    }

    /// Sum of gradient that landed in `view`'s buffer guard margins.
    pub fn guard_mass(&self, view: &TensorView<T>) -> T {
        let b = view.buffer();
        match self.bufs.get(&b.id()) {
            Some((guard, g)) => g[..*guard].iter().chain(&g[guard + b.len()..]).copied().sum(),
            None => T::zero(),
        }
    }
}

/// Contiguous buffer runs covering `view` in NCHW order.
fn runs<T: Element>(view: &TensorView<T>) -> Vec<(isize, usize)> {
    let d = view.dims();
    if view.is_row_major() {
        (0..d.n).map(|n| (view.plane_start(n, 0), d.image())).collect()
    } else if view.strides()[3] == 1 {
        let mut out = Vec::with_capacity(d.n * d.c * d.h);
        for n in 0..d.n {
            for c in 0..d.c {
                for h in 0..d.h {
                    out.push((view.index(n, c, h, 0), d.w));
                }
            }
        }
        out
    } else {
        view.indices().into_iter().map(|i| (i, 1)).collect()
    }
}

/// Forward-operation recorder. With recording off it only runs the kernels
/// (and optionally logs data movement), so the same network code serves
/// training and inference.
pub struct GradTape<T: Element> {
    entries: Vec<Entry<T>>,
    recording: bool,
    log: Option<Vec<MoveReport>>,
}

fn alloc_or<T: Element>(dest: Option<&TensorView<T>>, dims: Dims) -> Result<TensorView<T>> {
    match dest {
        Some(d) => Ok(d.clone()),
        None => TensorView::alloc(dims, 1),
    }
}

impl<T: Element> GradTape<T> {
    pub fn recording() -> Self {
        Self {
            entries: Vec::new(),
            recording: true,
            log: None,
        }
    }

    pub fn inference() -> Self {
        Self {
            entries: Vec::new(),
            recording: false,
            log: None,
        }
    }

    /// Also keep a [`MoveReport`] for every executed operation.
    pub fn with_move_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn move_log(&self) -> &[MoveReport] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn take_move_log(&mut self) -> Vec<MoveReport> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn push(&mut self, e: Entry<T>) {
        if self.recording {
            self.entries.push(e);
        }
    }

    fn log(&mut self, name: &str, kind: OpKind, transformed: usize, copied: u64) {
        if let Some(log) = self.log.as_mut() {
            log.push(MoveReport {
                op: name.to_string(),
                kind,
                transformed: transformed as u64,
                copied,
            });
        }
    }

    pub fn conv1x1(
        &mut self,
        name: &str,
        x: &TensorView<T>,
        p: &GroupConvParams<T>,
        dest: Option<&TensorView<T>>,
    ) -> Result<TensorView<T>> {
        self.conv1x1_stack(name, &ChannelStack::single(x)?, p, dest)
    }

    pub fn conv1x1_stack(
        &mut self,
        name: &str,
        x: &ChannelStack<T>,
        p: &GroupConvParams<T>,
        dest: Option<&TensorView<T>>,
    ) -> Result<TensorView<T>> {
        let out = alloc_or(dest, p.out_dims(x.dims()))?;
        let before = out.buffer().moves();
        conv::conv1x1_group_stack_into(x, p, &out)?;
        self.log(name, OpKind::Conv, out.numel(), out.buffer().moves() - before);
        self.push(Entry::Pointwise {
            input: x.clone(),
            params: p.clone(),
            output: out.clone(),
        });
        Ok(out)
    }

    pub fn conv3x3(
        &mut self,
        name: &str,
        x: &TensorView<T>,
        p: &GroupConvParams<T>,
        dest: Option<&TensorView<T>>,
    ) -> Result<TensorView<T>> {
        let out = alloc_or(dest, p.out_dims(x.dims()))?;
        let before = out.buffer().moves();
        conv::conv3x3_into(x, p, &out)?;
        self.log(name, OpKind::Conv, out.numel(), out.buffer().moves() - before);
        self.push(Entry::Conv3x3 {
            input: x.clone(),
            params: p.clone(),
            output: out.clone(),
        });
        Ok(out)
    }

    pub fn channel_shift(&mut self, name: &str, x: &TensorView<T>, spec: ChannelShiftSpec) -> Result<TensorView<T>> {
        let before = x.buffer().moves();
        let out = shift::channel_shift(x, spec)?;
        self.log(name, OpKind::Shift, x.numel(), x.buffer().moves() - before);
        if spec.shift_channels > 0 {
            self.push(Entry::ChannelShiftCopy {
                input: x.clone(),
                shift: spec.shift_channels,
            });
        }
        Ok(out)
    }

    pub fn address_shift(&mut self, name: &str, x: &TensorView<T>, dir: ShiftDirection) -> Result<TensorView<T>> {
        let out = shift::address_shift(x, dir)?;
        self.log(name, OpKind::Shift, x.numel(), 0);
        Ok(out)
    }

    /// The address-based module's shift stage (zero copy).
    pub fn address_stage(&mut self, name: &str, x: &TensorView<T>, groups: usize) -> Result<ChannelStack<T>> {
        let stack = conv::address_stage_segments(x, groups)?;
        self.log(name, OpKind::Shift, x.numel(), 0);
        Ok(stack)
    }

    pub fn fused_enhanced(
        &mut self,
        name: &str,
        x: &TensorView<T>,
        p: &GroupConvParams<T>,
        f: &FusedEnhancedSpec,
        dest: Option<&TensorView<T>>,
    ) -> Result<TensorView<T>> {
        if p.groups != FusedEnhancedSpec::GROUPS {
            return Err(Error::InvalidConfig(format!(
                "enhanced group convolution needs G = 4, got {}",
                p.groups
            )));
        }
        let out = alloc_or(dest, p.out_dims(x.dims()))?;
        let before = x.buffer().moves() + out.buffer().moves();
        let shifted = shift::channel_shift(x, ChannelShiftSpec::with_shift(p.groups, f.shift_channels))?;
        let stack = conv::enhanced_segments(&shifted, f)?;
        conv::conv1x1_group_stack_into(&stack, p, &out)?;
        let after = x.buffer().moves() + out.buffer().moves();
        self.log(name, OpKind::Conv, out.numel(), after - before);
        if f.shift_channels > 0 {
            self.push(Entry::ChannelShiftCopy {
                input: x.clone(),
                shift: f.shift_channels,
            });
        }
        self.push(Entry::Pointwise {
            input: stack,
            params: p.clone(),
            output: out.clone(),
        });
        Ok(out)
    }

    /// Unfused reference of [`fused_enhanced`](Self::fused_enhanced): the
    /// shifted groups are materialized into an arena before the convolution.
    pub fn composed_enhanced(
        &mut self,
        name: &str,
        x: &TensorView<T>,
        p: &GroupConvParams<T>,
        f: &FusedEnhancedSpec,
        dest: Option<&TensorView<T>>,
    ) -> Result<TensorView<T>> {
        if p.groups != FusedEnhancedSpec::GROUPS {
            return Err(Error::InvalidConfig(format!(
                "enhanced group convolution needs G = 4, got {}",
                p.groups
            )));
        }
        let d = x.dims();
        let shifted = self.channel_shift(
            &format!("{name}.channel_shift"),
            x,
            ChannelShiftSpec::with_shift(p.groups, f.shift_channels),
        )?;
        let stack = conv::enhanced_segments(&shifted, f)?;
        self.log(&format!("{name}.address_shift"), OpKind::Shift, d.numel(), 0);
        let cg = d.c / FusedEnhancedSpec::GROUPS;
        let arena = shift::arena_plan::<T>(d.n, d.h, d.w, &[cg; 4])?;
        let mut copied = 0;
        for (i, part) in stack.parts().iter().enumerate() {
            let slot = arena.slot(i)?;
            copied += self.copy_into(part, &slot)?;
        }
        self.log(&format!("{name}.materialize"), OpKind::Copy, d.numel(), copied);
        self.conv1x1(name, &arena.concat(), p, dest)
    }

    fn copy_into(&mut self, x: &TensorView<T>, out: &TensorView<T>) -> Result<u64> {
        let before = out.buffer().moves();
        shift::check_output("materialize", out, x.dims(), &[x])?;
        out.write_dense(&x.to_vec())?;
        let map = (0..x.numel()).map(Some).collect();
        self.push(Entry::Gather {
            input: x.clone(),
            map,
            output: out.clone(),
        });
        Ok(out.buffer().moves() - before)
    }

    /// Explicit copy of `x` (into `dest` when given).
    pub fn materialize(
        &mut self,
        name: &str,
        x: &TensorView<T>,
        dest: Option<&TensorView<T>>,
    ) -> Result<TensorView<T>> {
        let out = alloc_or(dest, x.dims())?;
        let copied = self.copy_into(x, &out)?;
        self.log(name, OpKind::Copy, x.numel(), copied);
        Ok(out)
    }

    pub fn channel_shuffle(&mut self, name: &str, x: &TensorView<T>, groups: usize) -> Result<TensorView<T>> {
        let out = shift::channel_shuffle_reference(x, groups)?;
        self.log(name, OpKind::Shuffle, x.numel(), out.buffer().moves());
        self.push(Entry::Gather {
            input: x.clone(),
            map: shift::shuffle_source_map(x.dims(), groups),
            output: out.clone(),
        });
        Ok(out)
    }

    pub fn feature_map_shift(&mut self, name: &str, x: &TensorView<T>, dir: ShiftDirection) -> Result<TensorView<T>> {
        let out = shift::feature_map_shift_reference(x, dir)?;
        self.log(name, OpKind::Shift, x.numel(), out.buffer().moves());
        self.push(Entry::Gather {
            input: x.clone(),
            map: shift::feature_map_shift_source_map(x.dims(), dir),
            output: out.clone(),
        });
        Ok(out)
    }

    pub fn arena_concat(&mut self, name: &str, arena: &ConcatArena<T>) -> TensorView<T> {
        let out = arena.concat();
        self.log(name, OpKind::Concat, out.numel(), 0);
        out
    }

    pub fn batchnorm_train(
        &mut self,
        name: &str,
        x: &TensorView<T>,
        bn: &BatchNormParams<T>,
        momentum: f64,
        dest: Option<&TensorView<T>>,
    ) -> Result<TensorView<T>> {
        let out = alloc_or(dest, x.dims())?;
        let before = out.buffer().moves();
        let stats = conv::batchnorm_train_into(x, bn, momentum, &out)?;
        self.log(name, OpKind::Norm, x.numel(), out.buffer().moves() - before);
        self.push(Entry::BatchNorm {
            input: x.clone(),
            gamma: bn.gamma.clone(),
            beta: bn.beta.clone(),
            stats,
            output: out.clone(),
        });
        Ok(out)
    }

    /// Inference batch norm. Not differentiable on the tape: backward through
    /// it reports a replay mismatch.
    pub fn batchnorm_infer(
        &mut self,
        name: &str,
        x: &TensorView<T>,
        bn: &BatchNormParams<T>,
        dest: Option<&TensorView<T>>,
    ) -> Result<TensorView<T>> {
        let out = alloc_or(dest, x.dims())?;
        let before = out.buffer().moves();
        conv::batchnorm_infer_into(x, bn, &out)?;
        self.log(name, OpKind::Norm, x.numel(), out.buffer().moves() - before);
        self.push(Entry::NoBackward {
            op: "batchnorm_infer",
            output: out.clone(),
        });
        Ok(out)
    }

    pub fn relu(&mut self, name: &str, x: &TensorView<T>, dest: Option<&TensorView<T>>) -> Result<TensorView<T>> {
        let out = alloc_or(dest, x.dims())?;
        let before = out.buffer().moves();
        conv::relu_into(x, &out)?;
        self.log(name, OpKind::Activation, x.numel(), out.buffer().moves() - before);
        self.push(Entry::Relu {
            input: x.clone(),
            output: out.clone(),
        });
        Ok(out)
    }

    pub fn avg_pool(
        &mut self,
        name: &str,
        x: &TensorView<T>,
        k: usize,
        stride: usize,
        dest: Option<&TensorView<T>>,
    ) -> Result<TensorView<T>> {
        let out = alloc_or(dest, conv::avg_pool_dims(x.dims(), k, stride)?)?;
        let before = out.buffer().moves();
        conv::avg_pool_into(x, k, stride, &out)?;
        self.log(name, OpKind::Pool, out.numel(), out.buffer().moves() - before);
        self.push(Entry::AvgPool {
            input: x.clone(),
            k,
            stride,
            output: out.clone(),
        });
        Ok(out)
    }

    pub fn global_avg_pool(&mut self, name: &str, x: &TensorView<T>) -> Result<TensorView<T>> {
        let out = conv::global_avg_pool(x)?;
        self.log(name, OpKind::Pool, out.numel(), out.buffer().moves());
        self.push(Entry::GlobalAvgPool {
            input: x.clone(),
            output: out.clone(),
        });
        Ok(out)
    }

    pub fn linear(
        &mut self,
        name: &str,
        x: &TensorView<T>,
        weight: &TensorView<T>,
        bias: Option<&TensorView<T>>,
    ) -> Result<TensorView<T>> {
        let out = conv::fully_connected(x, weight, bias)?;
        self.log(name, OpKind::Fc, out.numel(), out.buffer().moves());
        self.push(Entry::Linear {
            input: x.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            output: out.clone(),
        });
        Ok(out)
    }

    pub fn add(
        &mut self,
        name: &str,
        a: &TensorView<T>,
        b: &TensorView<T>,
        dest: Option<&TensorView<T>>,
    ) -> Result<TensorView<T>> {
        let out = alloc_or(dest, a.dims())?;
        let before = out.buffer().moves();
        shift::residual_add_into(a, b, &out)?;
        self.log(name, OpKind::Add, out.numel(), out.buffer().moves() - before);
        self.push(Entry::Add {
            a: a.clone(),
            b: b.clone(),
            output: out.clone(),
        });
        Ok(out)
    }

    pub fn softmax_cross_entropy(&mut self, logits: &TensorView<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
        let (loss, probs) = conv::softmax_cross_entropy(logits, labels)?;
        self.push(Entry::SoftmaxCe {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs: probs.clone(),
        });
        Ok((loss, probs))
    }

    /// Replays the tape in reverse order.
    pub fn backward(&self, seed: Seed<'_, T>) -> Result<Gradients<T>> {
        let mut grads = Gradients::default();
        let mut entries: &[Entry<T>] = &self.entries;
        match seed {
            Seed::Loss => {
                let Some((Entry::SoftmaxCe { logits, labels, probs }, rest)) = entries.split_last() else {
                    return Err(Error::TapeMismatch(
                        "last recorded op is not a softmax cross-entropy".into(),
                    ));
                };
                let k = logits.dims().image();
                let inv_n = T::one() / T::lit(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * inv_n).collect();
                for (n, &l) in labels.iter().enumerate() {
                    d[n * k + l] -= inv_n;
                }
                grads.add_to(logits, &d);
                entries = rest;
            }
            Seed::View(view, g) => {
                if g.len() != view.numel() {
                    return Err(Error::TapeMismatch(format!(
                        "seed has {} values for a view of {}",
                        g.len(),
                        view.numel()
                    )));
                }
                grads.add_to(view, g);
            }
        }
        for entry in entries.iter().rev() {
            backward_entry(entry, &mut grads)?;
        }
        Ok(grads)
    }
}

fn backward_entry<T: Element>(entry: &Entry<T>, grads: &mut Gradients<T>) -> Result<()> {
    match entry {
        Entry::Pointwise { input, params, output } => pointwise_backward(input, params, output, grads),
        Entry::Conv3x3 { input, params, output } => conv3x3_backward(input, params, output, grads),
        Entry::ChannelShiftCopy { input, shift } => {
            let d = input.dims();
            let run = shift * d.plane();
            let guard = input.buffer().guard() as isize;
            let g = grads.slot(input);
            for n in 0..d.n {
                let src = input.plane_start(n, 0) + guard;
                let dst = input.plane_start(n, d.c) + guard;
                for i in 0..run as isize {
                    let v = g[(dst + i) as usize];
                    g[(src + i) as usize] += v;
                    g[(dst + i) as usize] = T::zero();
                }
            }
            Ok(())
        }
        Entry::Gather { input, map, output } => {
            let dout = grads.wrt(output);
            let mut din = vec![T::zero(); input.numel()];
            for (m, &d) in map.iter().zip(&dout) {
                if let Some(i) = m {
                    din[*i] += d;
                }
            }
            grads.add_to(input, &din);
            Ok(())
        }
        Entry::BatchNorm {
            input,
            gamma,
            beta,
            stats,
            output,
        } => {
            let d = input.dims();
            let x = input.to_vec();
            let dy = grads.wrt(output);
            let g = gamma.to_vec();
            let plane = d.plane();
            let m = T::lit((d.n * plane) as f64);
            let mut sum_dy = vec![T::zero(); d.c];
            let mut sum_dy_xhat = vec![T::zero(); d.c];
            for (i, (xp, dyp)) in x.chunks(plane).zip(dy.chunks(plane)).enumerate() {
                let c = i % d.c;
                let (mu, inv) = (stats.mean[c], stats.inv_std[c]);
                for (&xv, &dv) in xp.iter().zip(dyp) {
                    sum_dy[c] += dv;
                    sum_dy_xhat[c] += dv * (xv - mu) * inv;
                }
            }
            let mut dx = Vec::with_capacity(x.len());
            for (i, (xp, dyp)) in x.chunks(plane).zip(dy.chunks(plane)).enumerate() {
                let c = i % d.c;
                let (mu, inv) = (stats.mean[c], stats.inv_std[c]);
                let k = g[c] * inv / m;
                dx.extend(
                    xp.iter()
                        .zip(dyp)
                        .map(|(&xv, &dv)| k * (m * dv - sum_dy[c] - (xv - mu) * inv * sum_dy_xhat[c])),
                );
            }
            grads.add_to(input, &dx);
            grads.add_to(gamma, &sum_dy_xhat);
            grads.add_to(beta, &sum_dy);
            Ok(())
        }
        Entry::Relu { input, output } => {
            let dy = grads.wrt(output);
            let dx: Vec<T> = input
                .to_vec()
                .into_iter()
                .zip(dy)
                .map(|(x, d)| if x > T::zero() { d } else { T::zero() })
                .collect();
            grads.add_to(input, &dx);
            Ok(())
        }
        Entry::AvgPool {
            input,
            k,
            stride,
            output,
        } => {
            let d = input.dims();
            let od = output.dims();
            let dy = grads.wrt(output);
            let inv = T::one() / T::lit((k * k) as f64);
            let mut dx = vec![T::zero(); d.numel()];
            for nc in 0..d.n * d.c {
                for y in 0..od.h {
                    for x in 0..od.w {
                        let g = dy[nc * od.plane() + y * od.w + x] * inv;
                        for ky in 0..*k {
                            for kx in 0..*k {
                                dx[nc * d.plane() + (y * stride + ky) * d.w + x * stride + kx] += g;
                            }
                        }
                    }
                }
            }
            grads.add_to(input, &dx);
            Ok(())
        }
        Entry::GlobalAvgPool { input, output } => {
            let d = input.dims();
            let dy = grads.wrt(output);
            let inv = T::one() / T::lit(d.plane() as f64);
            let dx: Vec<T> = (0..d.numel()).map(|i| dy[i / d.plane()] * inv).collect();
            grads.add_to(input, &dx);
            Ok(())
        }
        Entry::Linear {
            input,
            weight,
            bias,
            output,
        } => {
            let d = input.dims();
            let fan_in = d.image();
            let k = output.dims().c;
            let x = input.to_vec();
            let w = weight.to_vec();
            let dy = grads.wrt(output);
            let mut dx = vec![T::zero(); x.len()];
            let mut dw = vec![T::zero(); w.len()];
            let mut db = vec![T::zero(); k];
            for n in 0..d.n {
                for o in 0..k {
                    let g = dy[n * k + o];
                    db[o] += g;
                    for i in 0..fan_in {
                        dw[o * fan_in + i] += g * x[n * fan_in + i];
                        dx[n * fan_in + i] += g * w[o * fan_in + i];
                    }
                }
            }
            grads.add_to(input, &dx);
            grads.add_to(weight, &dw);
            if let Some(b) = bias {
                grads.add_to(b, &db);
            }
            Ok(())
        }
        Entry::Add { a, b, output } => {
            let dy = grads.wrt(output);
            grads.add_to(a, &dy);
            grads.add_to(b, &dy);
            Ok(())
        }
        Entry::SoftmaxCe { .. } => Err(Error::TapeMismatch(
            "softmax cross-entropy recorded before the end of the tape".into(),
        )),
        Entry::NoBackward { op, output } => {
            if grads.wrt(output).iter().any(|g| !g.is_zero()) {
                return Err(Error::TapeMismatch(format!("{op} has no backward rule")));
            }
            Ok(())
        }
    }
}

/// Dot product with eight independent partial sums.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

fn pointwise_backward<T: Element>(
    input: &ChannelStack<T>,
    p: &GroupConvParams<T>,
    output: &TensorView<T>,
    grads: &mut Gradients<T>,
) -> Result<()> {
    let d = input.dims();
    let od = output.dims();
    let x = input.to_vec();
    let w = p.weight.to_vec();
    let dy = grads.wrt(output);
    let (cig, cog, s) = (p.in_per_group(), p.out_per_group(), p.stride);
    let (plane, oplane) = (d.plane(), od.plane());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); p.c_out];
    for n in 0..d.n {
        for oc in 0..p.c_out {
            let g = oc / cog;
            let dyp = &dy[(n * p.c_out + oc) * oplane..][..oplane];
            db[oc] += dyp.iter().copied().sum();
            for j in 0..cig {
                let ic = g * cig + j;
                let base = (n * d.c + ic) * plane;
                let wv = w[oc * cig + j];
                let mut acc = T::zero();
                if s == 1 {
                    acc = dot(dyp, &x[base..base + plane]);
                    for (dxv, &gy) in dx[base..base + plane].iter_mut().zip(dyp) {
                        *dxv += gy * wv;
                    }
                } else {
                    for y in 0..od.h {
                        for xo in 0..od.w {
                            let src = base + y * s * d.w + xo * s;
                            let gy = dyp[y * od.w + xo];
                            acc += gy * x[src];
                            dx[src] += gy * wv;
                        }
                    }
                }
                dw[oc * cig + j] += acc;
            }
        }
    }
    // scatter the stacked input gradient back to each part
    let mut c0 = 0;
    for part in input.parts() {
        let pd = part.dims();
        let mut local = Vec::with_capacity(pd.numel());
        for n in 0..d.n {
            local.extend_from_slice(&dx[(n * d.c + c0) * plane..][..pd.c * plane]);
        }
        grads.add_to(part, &local);
        c0 += pd.c;
    }
    grads.add_to(&p.weight, &dw);
    if let Some(b) = &p.bias {
        grads.add_to(b, &db);
    }
    Ok(())
}

fn conv3x3_backward<T: Element>(
    input: &TensorView<T>,
    p: &GroupConvParams<T>,
    output: &TensorView<T>,
    grads: &mut Gradients<T>,
) -> Result<()> {
    let d = input.dims();
    let od = output.dims();
    let x = input.to_vec();
    let w = p.weight.to_vec();
    let dy = grads.wrt(output);
    let (h, wd, s) = (d.h as isize, d.w as isize, p.stride as isize);
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); p.c_out];
    for n in 0..d.n {
        for oc in 0..p.c_out {
            let dyp = &dy[(n * p.c_out + oc) * od.plane()..][..od.plane()];
            db[oc] += dyp.iter().copied().sum();
            for ic in 0..d.c {
                let base = (n * d.c + ic) * d.plane();
                let kb = (oc * d.c + ic) * 9;
                for y in 0..od.h {
                    for xo in 0..od.w {
                        let gy = dyp[y * od.w + xo];
                        for ky in 0..3isize {
                            let sy = y as isize * s + ky - 1;
                            if !(0..h).contains(&sy) {
                                continue;
                            }
                            for kx in 0..3isize {
                                let sx = xo as isize * s + kx - 1;
                                if (0..wd).contains(&sx) {
                                    let si = base + (sy * wd + sx) as usize;
                                    let ki = kb + (ky * 3 + kx) as usize;
                                    dw[ki] += gy * x[si];
                                    dx[si] += gy * w[ki];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grads.add_to(input, &dx);
    grads.add_to(&p.weight, &dw);
    if let Some(b) = &p.bias {
        grads.add_to(b, &db);
    }
    Ok(())
}
