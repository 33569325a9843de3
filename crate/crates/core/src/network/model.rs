use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{ModuleConfig, ModuleVariant, NetworkSpec, Shortcut};
use crate::autodiff::GradTape;
use crate::conv::{self, BatchNormParams, FusedEnhancedSpec, GroupConvParams};
use crate::error::{Error, Result};
use crate::shift::{self, ChannelShiftSpec, ConcatArena};
use crate::tensor::{Dims, Element, TensorView};

/// How batch norm layers run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    /// Batch statistics; running statistics move by `momentum`.
    Train { momentum: f64 },
    /// Running statistics.
    Infer,
}

/// A convolution with an optional following batch norm.
#[derive(Clone, Debug)]
pub struct ConvUnit<T: Element> {
    pub conv: GroupConvParams<T>,
    pub bn: Option<BatchNormParams<T>>,
}

enum Input<'a, T: Element> {
    View(&'a TensorView<T>),
    Stack(&'a conv::ChannelStack<T>),
}

impl<T: Element> ConvUnit<T> {
    fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        groups: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: GroupConvParams::msra(c_in, c_out, groups, kernel, stride, rng)?,
            bn: Some(BatchNormParams::identity(c_out)?),
        })
    }

    fn forward(
        &self,
        name: &str,
        x: Input<'_, T>,
        tape: &mut GradTape<T>,
        mode: BnMode,
        dest: Option<&TensorView<T>>,
    ) -> Result<TensorView<T>> {
        let conv_dest = if self.bn.is_some() { None } else { dest };
        let y = match x {
            Input::View(v) if self.conv.kernel == 3 => tape.conv3x3(name, v, &self.conv, conv_dest)?,
            Input::View(v) => tape.conv1x1(name, v, &self.conv, conv_dest)?,
            Input::Stack(s) => tape.conv1x1_stack(name, s, &self.conv, conv_dest)?,
        };
        match &self.bn {
            None => Ok(y),
            Some(bn) => {
                let bn_name = format!("{}.bn", name.trim_end_matches(".conv"));
                match mode {
                    BnMode::Train { momentum } => tape.batchnorm_train(&bn_name, &y, bn, momentum, dest),
                    BnMode::Infer => tape.batchnorm_infer(&bn_name, &y, bn, dest),
                }
            }
        }
    }

    fn folded(&self) -> Result<Self> {
        Ok(match &self.bn {
            Some(bn) => Self {
                conv: conv::fold_bn(&self.conv, bn)?,
                bn: None,
            },
            None => self.clone(),
        })
    }

    fn parameters(&self, out: &mut Vec<TensorView<T>>) {
        out.push(self.conv.weight.clone());
        out.extend(self.conv.bias.clone());
        if let Some(bn) = &self.bn {
            out.push(bn.gamma.clone());
            out.push(bn.beta.clone());
        }
    }
}

/// One address-based or enhanced module.
#[derive(Clone, Debug)]
pub struct AddressModule<T: Element> {
    pub name: String,
    pub cfg: ModuleConfig,
    pub gconv1: ConvUnit<T>,
    pub gconv2: ConvUnit<T>,
}

impl<T: Element> AddressModule<T> {
    pub fn new<R: Rng>(name: &str, cfg: ModuleConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.groups();
        let mid = cfg.intermediate();
        Ok(Self {
            name: name.to_string(),
            cfg,
            gconv1: ConvUnit::new(cfg.c_in, mid, g, 1, 1, rng)?,
            gconv2: ConvUnit::new(mid, cfg.branch_out(), g, 1, cfg.stride, rng)?,
        })
    }

    pub fn parameters(&self) -> Vec<TensorView<T>> {
        let mut v = Vec::new();
        self.gconv1.parameters(&mut v);
        self.gconv2.parameters(&mut v);
        v
    }

    pub fn for_each_bn(&self, mut f: impl FnMut(&BatchNormParams<T>)) {
        self.gconv1.bn.iter().chain(&self.gconv2.bn).for_each(&mut f);
    }

    pub fn folded(&self) -> Result<Self> {
        Ok(Self {
            name: self.name.clone(),
            cfg: self.cfg,
            gconv1: self.gconv1.folded()?,
            gconv2: self.gconv2.folded()?,
        })
    }

    /// Runs the module. `arena` is given when the producer of `x` already
    /// wrote it into slot 0 of the module's concatenation arena.
    pub fn forward(
        &self,
        x: &TensorView<T>,
        arena: Option<&ConcatArena<T>>,
        tape: &mut GradTape<T>,
        mode: BnMode,
        fused: bool,
    ) -> Result<TensorView<T>> {
        let cfg = &self.cfg;
        let d = x.dims();
        if d.c != cfg.c_in {
            return Err(Error::ShapeMismatch {
                op: "address_module",
                expected: vec![cfg.c_in],
                got: vec![d.c],
            });
        }
        let n = &self.name;
        let (mid, s, g) = (cfg.intermediate(), cfg.shift_channels(), cfg.groups());

        let pre = self
            .gconv1
            .forward(&format!("{n}.gconv1.conv"), Input::View(x), tape, mode, None)?;
        let act = TensorView::alloc_with_reserve(d.with_channels(mid), 1, s)?;
        tape.relu(&format!("{n}.relu"), &pre, Some(&act))?;

        let (ho, wo) = (d.h.div_ceil(cfg.stride), d.w.div_ceil(cfg.stride));
        let shortcut = cfg.shortcut();
        let arena = match (shortcut, arena) {
            (Shortcut::Add, None) => None,
            (Shortcut::Add, Some(_)) => {
                return Err(Error::InvalidConfig(format!(
                    "{n}: additive shortcut cannot take an arena"
                )));
            }
            (_, Some(a)) => Some(a.clone()),
            (_, None) => Some(shift::arena_plan::<T>(d.n, ho, wo, &[cfg.c_in, cfg.branch_out()])?),
        };
        let branch_dest = arena.as_ref().map(|a| a.slot(1)).transpose()?;
        let branch_dest = branch_dest.as_ref();

        let gname = format!("{n}.gconv2.conv");
        let branch = match cfg.variant {
            ModuleVariant::AddressBased => {
                let shifted =
                    tape.channel_shift(&format!("{n}.channel_shift"), &act, ChannelShiftSpec::with_shift(g, s))?;
                let stack = tape.address_stage(&format!("{n}.address_shift"), &shifted, g)?;
                self.gconv2
                    .forward(&gname, Input::Stack(&stack), tape, mode, branch_dest)?
            }
            ModuleVariant::AddressEnhanced => {
                let f = FusedEnhancedSpec {
                    directions: FusedEnhancedSpec::DIRECTIONS.map(Some),
                    shift_channels: s,
                };
                let p = &self.gconv2.conv;
                let conv_dest = if self.gconv2.bn.is_some() { None } else { branch_dest };
                let y = if fused {
                    tape.fused_enhanced(&gname, &act, p, &f, conv_dest)?
                } else {
                    tape.composed_enhanced(&gname, &act, p, &f, conv_dest)?
                };
                match (&self.gconv2.bn, mode) {
                    (None, _) => y,
                    (Some(bn), BnMode::Train { momentum }) => {
                        tape.batchnorm_train(&format!("{n}.gconv2.bn"), &y, bn, momentum, branch_dest)?
                    }
                    (Some(bn), BnMode::Infer) => {
                        tape.batchnorm_infer(&format!("{n}.gconv2.bn"), &y, bn, branch_dest)?
                    }
                }
            }
        };

        match (shortcut, arena) {
            (Shortcut::Add, _) => tape.add(&format!("{n}.add"), x, &branch, None),
            (Shortcut::Concat, Some(a)) => {
                let slot = a.slot(0)?;
                if !slot.shares_buffer(x) || slot.offset() != x.offset() {
                    tape.materialize(&format!("{n}.shortcut_copy"), x, Some(&slot))?;
                }
                Ok(tape.arena_concat(&format!("{n}.concat"), &a))
            }
            (Shortcut::PooledConcat, Some(a)) => {
                tape.avg_pool(&format!("{n}.shortcut_pool"), x, 2, 2, Some(&a.slot(0)?))?;
                Ok(tape.arena_concat(&format!("{n}.concat"), &a))
            }
            (_, None) => unreachable!("concat shortcuts always have an arena"),
        }
    }
}

/// A built network with parameters.
#[derive(Clone, Debug)]
pub struct Network<T: Element> {
    spec: NetworkSpec,
    stem: ConvUnit<T>,
    modules: Vec<AddressModule<T>>,
    fc_weight: TensorView<T>,
    fc_bias: TensorView<T>,
    fusion: bool,
}

impl<T: Element> Network<T> {
    /// MSRA-initialized convolutions, identity batch norm, and a classifier
    /// drawn from `N(0, 0.01^2)` so the initial loss is close to `ln K`.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        Self::from_rng(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let stem = ConvUnit::new(spec.input.c, spec.stem.c_out, 1, 3, spec.stem.stride, rng)?;
        let modules = spec
            .modules()
            .map(|(s, m, cfg)| AddressModule::new(&format!("stage{}.module{}", s + 1, m + 1), *cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let c = spec.final_channels();
        let dist = Normal::new(0.0, 0.01).expect("valid std");
        let w: Vec<T> = (0..spec.classes * c).map(|_| T::lit(dist.sample(rng))).collect();
        Ok(Self {
            spec: spec.clone(),
            stem,
            modules,
            fc_weight: TensorView::from_vec(Dims::new(spec.classes, c, 1, 1)?, w, 1)?,
            fc_bias: TensorView::zeros(Dims::new(1, spec.classes, 1, 1)?)?,
            fusion: true,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn modules(&self) -> &[AddressModule<T>] {
        &self.modules
    }

    pub fn fusion(&self) -> bool {
        self.fusion
    }

    /// Enhanced modules use the fused group convolution when on, the
    /// materializing composition when off.
    pub fn set_fusion(&mut self, on: bool) {
        self.fusion = on;
    }

    pub fn has_bn(&self) -> bool {
        self.stem.bn.is_some()
    }

    /// Copy with every batch norm folded into its convolution.
    pub fn folded(&self) -> Result<Self> {
        Ok(Self {
            spec: self.spec.clone(),
            stem: self.stem.folded()?,
            modules: self.modules.iter().map(|m| m.folded()).collect::<Result<_>>()?,
            fc_weight: self.fc_weight.materialize()?,
            fc_bias: self.fc_bias.materialize()?,
            fusion: self.fusion,
        })
    }

    /// Trainable tensors, each exactly once.
    pub fn parameters(&self) -> Vec<TensorView<T>> {
        let mut v = Vec::new();
        self.stem.parameters(&mut v);
        for m in &self.modules {
            v.extend(m.parameters());
        }
        v.push(self.fc_weight.clone());
        v.push(self.fc_bias.clone());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn for_each_bn(&self, mut f: impl FnMut(&BatchNormParams<T>)) {
        self.stem.bn.iter().for_each(&mut f);
        self.modules.iter().for_each(|m| m.for_each_bn(&mut f));
    }

    /// Logits `(N, K, 1, 1)` for an `(N, C, H, W)` batch.
    pub fn forward(&self, x: &TensorView<T>, tape: &mut GradTape<T>, mode: BnMode) -> Result<TensorView<T>> {
        let d = x.dims();
        if d.c != self.spec.input.c {
            return Err(Error::ShapeMismatch {
                op: "network",
                expected: vec![self.spec.input.c],
                got: vec![d.c],
            });
        }
        self.spec.clone().with_input(d.h, d.w).validate()?;
        let (h0, w0) = (d.h.div_ceil(self.spec.stem.stride), d.w.div_ceil(self.spec.stem.stride));

        let mut arena = match self.modules.first() {
            Some(m) if m.cfg.shortcut() == Shortcut::Concat => {
                Some(shift::arena_plan::<T>(d.n, h0, w0, &[m.cfg.c_in, m.cfg.branch_out()])?)
            }
            _ => None,
        };
        let stem_dest = arena.as_ref().map(|a| a.slot(0)).transpose()?;
        let pre = self.stem.forward("stem.conv", Input::View(x), tape, mode, None)?;
        let mut h = tape.relu("stem.relu", &pre, stem_dest.as_ref())?;
        for m in &self.modules {
            h = m.forward(&h, arena.take().as_ref(), tape, mode, self.fusion)?;
        }
        let pooled = tape.global_avg_pool("head.gap", &h)?;
        tape.linear("head.fc", &pooled, &self.fc_weight, Some(&self.fc_bias))
    }

    /// Sets running statistics to those of `x` (one training-mode pass with
    /// momentum 1).
    pub fn calibrate_bn(&self, x: &TensorView<T>) -> Result<()> {
        self.forward(x, &mut GradTape::inference(), BnMode::Train { momentum: 1.0 })?;
        Ok(())
    }

    /// Predicted class for every image.
    pub fn predict(&self, x: &TensorView<T>, mode: BnMode) -> Result<Vec<usize>> {
        let logits = self.forward(x, &mut GradTape::inference(), mode)?;
        Ok(argmax_rows(&logits.to_vec(), self.spec.classes))
    }
}

pub fn argmax_rows<T: Element>(values: &[T], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, T::neg_infinity()),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}
