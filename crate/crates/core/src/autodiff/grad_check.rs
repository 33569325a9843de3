use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{GradTape, Seed};
use crate::conv::{BatchNormParams, FusedEnhancedSpec, GroupConvParams};
use crate::error::{Error, Result};
use crate::network::{AddressModule, BnMode, ModuleConfig, ModuleVariant};
use crate::shift::{self, ChannelShiftSpec, ShiftDirection};
use crate::tensor::{Dims, TensorView};

/// Largest accepted relative error in f64.
pub const GRAD_TOLERANCE: f64 = 1e-6;

const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GradOp {
    Conv1x1Group,
    Conv1x1Strided,
    Conv3x3,
    Conv3x3Strided,
    ChannelShift,
    AddressShift,
    AddressStage,
    FusedEnhanced,
    ComposedEnhanced,
    ChannelShuffle,
    FeatureMapShift,
    BatchNormTrain,
    Relu,
    AvgPool,
    GlobalAvgPool,
    Linear,
    ResidualAdd,
    ArenaConcat,
    SoftmaxCrossEntropy,
    AddressModule,
    EnhancedModule,
}

impl GradOp {
    pub const ALL: [GradOp; 21] = [
        GradOp::Conv1x1Group,
        GradOp::Conv1x1Strided,
        GradOp::Conv3x3,
        GradOp::Conv3x3Strided,
        GradOp::ChannelShift,
        GradOp::AddressShift,
        GradOp::AddressStage,
        GradOp::FusedEnhanced,
        GradOp::ComposedEnhanced,
        GradOp::ChannelShuffle,
        GradOp::FeatureMapShift,
        GradOp::BatchNormTrain,
        GradOp::Relu,
        GradOp::AvgPool,
        GradOp::GlobalAvgPool,
        GradOp::Linear,
        GradOp::ResidualAdd,
        GradOp::ArenaConcat,
        GradOp::SoftmaxCrossEntropy,
        GradOp::AddressModule,
        GradOp::EnhancedModule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Conv1x1Group => "conv1x1_group",
            GradOp::Conv1x1Strided => "conv1x1_group_stride2",
            GradOp::Conv3x3 => "conv3x3",
            GradOp::Conv3x3Strided => "conv3x3_stride2",
            GradOp::ChannelShift => "channel_shift",
            GradOp::AddressShift => "address_shift",
            GradOp::AddressStage => "address_stage",
            GradOp::FusedEnhanced => "fused_enhanced_gconv",
            GradOp::ComposedEnhanced => "composed_enhanced_gconv",
            GradOp::ChannelShuffle => "channel_shuffle",
            GradOp::FeatureMapShift => "feature_map_shift",
            GradOp::BatchNormTrain => "batchnorm_train",
            GradOp::Relu => "relu",
            GradOp::AvgPool => "avg_pool",
            GradOp::GlobalAvgPool => "global_avg_pool",
            GradOp::Linear => "fully_connected",
            GradOp::ResidualAdd => "residual_add",
            GradOp::ArenaConcat => "arena_concat",
            GradOp::SoftmaxCrossEntropy => "softmax_cross_entropy",
            GradOp::AddressModule => "address_module",
            GradOp::EnhancedModule => "enhanced_module",
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

/// What a checked forward pass produces.
pub enum Objective {
    /// Reduced to `sum_j r_j * out_j` with fixed random weights `r`.
    Output(TensorView<f64>),
    /// The loss of the last softmax cross-entropy on the tape.
    Loss(f64),
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Compares tape gradients with central differences for every element of
/// every leaf. `forward` is re-run for each perturbation and must read the
/// leaves through their buffers.
pub fn check_gradients(
    op: &str,
    leaves: &[TensorView<f64>],
    seed: u64,
    forward: impl Fn(&mut GradTape<f64>) -> Result<Objective>,
) -> Result<GradCheckReport> {
    check_gradients_with_step(op, STEP, leaves, seed, forward)
}

/// [`check_gradients`] with an explicit difference step. For linear
/// operations a large step removes most of the rounding error.
pub fn check_gradients_with_step(
    op: &str,
    step: f64,
    leaves: &[TensorView<f64>],
    seed: u64,
    forward: impl Fn(&mut GradTape<f64>) -> Result<Objective>,
) -> Result<GradCheckReport> {
    let mut tape = GradTape::recording();
    let objective = forward(&mut tape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (grads, weights) = match &objective {
        Objective::Output(v) => {
            let r: Vec<f64> = (0..v.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
            (tape.backward(Seed::View(v, &r))?, Some(r))
        }
        Objective::Loss(_) => (tape.backward(Seed::Loss)?, None),
    };
    let eval = || -> Result<f64> {
        let mut t = GradTape::inference();
        Ok(match forward(&mut t)? {
            Objective::Output(v) => {
                let r = weights
                    .as_ref()
                    .ok_or_else(|| Error::TapeMismatch("objective changed kind".into()))?;
                v.to_vec().iter().zip(r).map(|(a, b)| a * b).sum()
            }
            Objective::Loss(l) => l,
        })
    };
    let mut worst = 0f64;
    let mut checked = 0;
    for leaf in leaves {
        let analytic = grads.wrt(leaf);
        let original = leaf.to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            leaf.update(|i, v| if i == k { original[k] + step } else { v });
            let plus = eval()?;
            leaf.update(|i, v| if i == k { original[k] - step } else { v });
            let minus = eval()?;
            leaf.update(|i, v| if i == k { original[k] } else { v });
            worst = worst.max(rel_error(a, (plus - minus) / (2.0 * step)));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        checked,
        max_rel_error: worst,
    })
}

fn dims(n: usize, c: usize, h: usize, w: usize) -> Dims {
    Dims { n, c, h, w }
}

fn random(rng: &mut ChaCha8Rng, d: Dims) -> Result<TensorView<f64>> {
    TensorView::from_fn(d, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks are never crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, d: Dims) -> Result<TensorView<f64>> {
    TensorView::from_fn(d, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn with_reserve(rng: &mut ChaCha8Rng, d: Dims, reserve: usize) -> Result<TensorView<f64>> {
    let t = TensorView::alloc_with_reserve(d, 1, reserve)?;
    let v: Vec<f64> = (0..d.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    t.write_dense(&v)?;
    Ok(t)
}

fn conv(
    rng: &mut ChaCha8Rng,
    c_in: usize,
    c_out: usize,
    groups: usize,
    kernel: usize,
    stride: usize,
) -> Result<GroupConvParams<f64>> {
    let count = c_out * (c_in / groups) * kernel * kernel;
    let w = (0..count).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    GroupConvParams::new(c_in, c_out, groups, kernel, stride, w, Some(b))
}

fn conv_leaves(p: &GroupConvParams<f64>) -> Vec<TensorView<f64>> {
    let mut v = vec![p.weight.clone()];
    v.extend(p.bias.clone());
    v
}

fn randomize_bn(rng: &mut ChaCha8Rng, bn: &BatchNormParams<f64>) {
    bn.gamma.update(|_, _| rng.random_range(0.5..1.5));
    bn.beta.update(|_, _| rng.random_range(-0.5..0.5));
}

/// Gradient check of one operation on small random f64 inputs.
pub fn grad_check(op: GradOp, seed: u64) -> Result<GradCheckReport> {
    grad_check_with_step(op, seed, STEP)
}

pub fn grad_check_with_step(op: GradOp, seed: u64, step: f64) -> Result<GradCheckReport> {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let name = op.name();
    match op {
        GradOp::Conv1x1Group | GradOp::Conv1x1Strided => {
            let stride = if op == GradOp::Conv1x1Group { 1 } else { 2 };
            let x = random(rng, dims(2, 8, 4, 4))?;
            let p = conv(rng, 8, 6, 2, 1, stride)?;
            let mut leaves = conv_leaves(&p);
            leaves.push(x.clone());
            check_gradients_with_step(name, step, &leaves, seed, |t| {
                Ok(Objective::Output(t.conv1x1("conv", &x, &p, None)?))
            })
        }
        GradOp::Conv3x3 | GradOp::Conv3x3Strided => {
            let stride = if op == GradOp::Conv3x3 { 1 } else { 2 };
            let x = random(rng, dims(2, 3, 5, 5))?;
            let p = conv(rng, 3, 4, 1, 3, stride)?;
            let mut leaves = conv_leaves(&p);
            leaves.push(x.clone());
            check_gradients_with_step(name, step, &leaves, seed, |t| {
                Ok(Objective::Output(t.conv3x3("conv", &x, &p, None)?))
            })
        }
        GradOp::ChannelShift => {
            let x = with_reserve(rng, dims(2, 8, 3, 3), 2)?;
            let spec = ChannelShiftSpec::new(8, 2)?;
            check_gradients_with_step(name, step, std::slice::from_ref(&x), seed, |t| {
                Ok(Objective::Output(t.channel_shift("cs", &x, spec)?))
            })
        }
        GradOp::AddressShift => {
            let x = random(rng, dims(2, 4, 4, 4))?;
            check_gradients_with_step(name, step, std::slice::from_ref(&x), seed, |t| {
                let a = t.address_shift("down", &x, ShiftDirection::Down)?;
                let b = t.address_shift("left", &x, ShiftDirection::Left)?;
                Ok(Objective::Output(t.add("sum", &a, &b, None)?))
            })
        }
        GradOp::AddressStage => {
            let x = with_reserve(rng, dims(2, 24, 4, 4), 4)?;
            let p = conv(rng, 24, 6, 3, 1, 1)?;
            let spec = ChannelShiftSpec::new(24, 3)?;
            let mut leaves = conv_leaves(&p);
            leaves.push(x.clone());
            check_gradients_with_step(name, step, &leaves, seed, |t| {
                let s = t.channel_shift("cs", &x, spec)?;
                let stack = t.address_stage("as", &s, 3)?;
                Ok(Objective::Output(t.conv1x1_stack("conv", &stack, &p, None)?))
            })
        }
        GradOp::FusedEnhanced | GradOp::ComposedEnhanced => {
            let x = with_reserve(rng, dims(2, 8, 4, 4), 1)?;
            let p = conv(rng, 8, 8, 4, 1, if op == GradOp::FusedEnhanced { 1 } else { 2 })?;
            let f = FusedEnhancedSpec::for_channels(8)?;
            let mut leaves = conv_leaves(&p);
            leaves.push(x.clone());
            check_gradients_with_step(name, step, &leaves, seed, |t| {
                Ok(Objective::Output(if op == GradOp::FusedEnhanced {
                    t.fused_enhanced("gconv", &x, &p, &f, None)?
                } else {
                    t.composed_enhanced("gconv", &x, &p, &f, None)?
                }))
            })
        }
        GradOp::ChannelShuffle => {
            let x = random(rng, dims(2, 6, 3, 3))?;
            check_gradients_with_step(name, step, std::slice::from_ref(&x), seed, |t| {
                Ok(Objective::Output(t.channel_shuffle("shuffle", &x, 3)?))
            })
        }
        GradOp::FeatureMapShift => {
            let x = random(rng, dims(2, 3, 4, 4))?;
            check_gradients_with_step(name, step, std::slice::from_ref(&x), seed, |t| {
                Ok(Objective::Output(t.feature_map_shift(
                    "fms",
                    &x,
                    ShiftDirection::Right,
                )?))
            })
        }
        GradOp::BatchNormTrain => {
            let x = random(rng, dims(3, 4, 3, 3))?;
            let bn = BatchNormParams::identity(4)?;
            randomize_bn(rng, &bn);
            let leaves = [x.clone(), bn.gamma.clone(), bn.beta.clone()];
            check_gradients_with_step(name, step, &leaves, seed, |t| {
                Ok(Objective::Output(t.batchnorm_train("bn", &x, &bn, 0.1, None)?))
            })
        }
        GradOp::Relu => {
            let x = away_from_zero(rng, dims(2, 3, 3, 3))?;
            check_gradients_with_step(name, step, std::slice::from_ref(&x), seed, |t| {
                Ok(Objective::Output(t.relu("relu", &x, None)?))
            })
        }
        GradOp::AvgPool => {
            let x = random(rng, dims(2, 3, 4, 4))?;
            check_gradients_with_step(name, step, std::slice::from_ref(&x), seed, |t| {
                Ok(Objective::Output(t.avg_pool("pool", &x, 2, 2, None)?))
            })
        }
        GradOp::GlobalAvgPool => {
            let x = random(rng, dims(2, 3, 3, 3))?;
            check_gradients_with_step(name, step, std::slice::from_ref(&x), seed, |t| {
                Ok(Objective::Output(t.global_avg_pool("gap", &x)?))
            })
        }
        GradOp::Linear => {
            let x = random(rng, dims(3, 4, 2, 2))?;
            let w = random(rng, dims(5, 16, 1, 1))?;
            let b = random(rng, dims(1, 5, 1, 1))?;
            let leaves = [x.clone(), w.clone(), b.clone()];
            check_gradients_with_step(name, step, &leaves, seed, |t| {
                Ok(Objective::Output(t.linear("fc", &x, &w, Some(&b))?))
            })
        }
        GradOp::ResidualAdd => {
            let a = random(rng, dims(2, 3, 3, 3))?;
            let b = random(rng, dims(2, 3, 3, 3))?;
            let leaves = [a.clone(), b.clone()];
            check_gradients_with_step(name, step, &leaves, seed, |t| {
                Ok(Objective::Output(t.add("add", &a, &b, None)?))
            })
        }
        GradOp::ArenaConcat => {
            let a = random(rng, dims(2, 2, 3, 3))?;
            let b = away_from_zero(rng, dims(2, 3, 3, 3))?;
            let leaves = [a.clone(), b.clone()];
            check_gradients_with_step(name, step, &leaves, seed, |t| {
                let arena = shift::arena_plan::<f64>(2, 3, 3, &[2, 3])?;
                t.materialize("copy", &a, Some(&arena.slot(0)?))?;
                t.relu("relu", &b, Some(&arena.slot(1)?))?;
                Ok(Objective::Output(t.arena_concat("concat", &arena)))
            })
        }
        GradOp::SoftmaxCrossEntropy => {
            let logits = random(rng, dims(4, 5, 1, 1))?;
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            check_gradients_with_step(name, step, std::slice::from_ref(&logits), seed, |t| {
                Ok(Objective::Loss(t.softmax_cross_entropy(&logits, &labels)?.0))
            })
        }
        GradOp::AddressModule | GradOp::EnhancedModule => {
            let cfg = if op == GradOp::AddressModule {
                ModuleConfig {
                    variant: ModuleVariant::AddressBased,
                    c_in: 6,
                    c_out: 12,
                    expansion: 4,
                    stride: 2,
                }
            } else {
                ModuleConfig {
                    variant: ModuleVariant::AddressEnhanced,
                    c_in: 8,
                    c_out: 8,
                    expansion: 2,
                    stride: 1,
                }
            };
            let x = random(rng, dims(2, cfg.c_in, 4, 4))?;
            let module = AddressModule::<f64>::new("m", cfg, rng)?;
            module.for_each_bn(|bn| randomize_bn(rng, bn));
            let mut leaves = module.parameters();
            leaves.push(x.clone());
            check_gradients_with_step(name, step, &leaves, seed, |t| {
                Ok(Objective::Output(module.forward(
                    &x,
                    None,
                    t,
                    BnMode::Train { momentum: 0.1 },
                    true,
                )?))
            })
        }
    }
}

pub fn grad_check_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    GradOp::ALL.iter().map(|&op| grad_check(op, seed)).collect()
}
