//! Seeded property suites behind `addrshift verify`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analyzer::{count_costs, movement_audit};
use crate::autodiff::{grad_check, grad_check_with_step, GradOp, GradTape, Seed};
use crate::conv::{self, BatchNormParams, FusedEnhancedSpec, GroupConvParams};
use crate::error::{Error, Result};
use crate::network::{build_network, BnMode, Network, NETWORK_NAMES};
use crate::shift::{self, ChannelShiftSpec, ShiftDirection};
use crate::tensor::{Dims, Element, TensorView};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    All,
    Shift,
    Conv,
    Grad,
    Net,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::All => "all",
            Suite::Shift => "shift",
            Suite::Conv => "conv",
            Suite::Grad => "grad",
            Suite::Net => "net",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Suite::All, Suite::Shift, Suite::Conv, Suite::Grad, Suite::Net]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite '{s}'")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{verdict}  {}/{}  {}", c.suite, c.name, c.detail);
        }
        let _ = writeln!(s, "{} checks, {} failed", self.checks.len(), self.failures());
        s
    }

    fn record(&mut self, suite: &'static str, name: impl Into<String>, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.checks.push(CheckResult {
            suite,
            name: name.into(),
            passed,
            detail,
        });
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> VerifyReport {
    let mut r = VerifyReport::default();
    if matches!(suite, Suite::All | Suite::Shift) {
        shift_suite(&mut r, seed);
    }
    if matches!(suite, Suite::All | Suite::Conv) {
        conv_suite(&mut r, seed);
    }
    if matches!(suite, Suite::All | Suite::Grad) {
        grad_suite(&mut r, seed);
    }
    if matches!(suite, Suite::All | Suite::Net) {
        net_suite(&mut r, seed);
    }
    r
}

fn random<T: Element>(rng: &mut ChaCha8Rng, d: Dims, guard_rows: usize) -> Result<TensorView<T>> {
    let v = (0..d.numel()).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
    TensorView::from_vec(d, v, guard_rows)
}

fn random_dims(rng: &mut ChaCha8Rng, max_n: usize, max_c: usize, max_hw: usize) -> Dims {
    Dims {
        n: rng.random_range(1..=max_n),
        c: rng.random_range(1..=max_c),
        h: rng.random_range(1..=max_hw),
        w: rng.random_range(1..=max_hw),
    }
}

fn max_abs_diff<T: Element>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(if a.len() == b.len() { 0.0 } else { f64::INFINITY }, f64::max)
}

/// Positions where an address shift must differ from the zero-padded
/// feature-map shift: boundary outputs whose flat source lies inside the
/// buffer (and therefore holds another row's or channel's value).
pub fn predicted_boundary(d: Dims, dir: ShiftDirection) -> Vec<usize> {
    let (dy, dx) = dir.displacement();
    let s = dir.offset(d.w);
    let len = d.numel() as isize;
    (0..d.numel())
        .filter(|&i| {
            let (y, x) = (((i / d.w) % d.h) as isize, (i % d.w) as isize);
            let (sy, sx) = (y - dy, x - dx);
            let interior = (0..d.h as isize).contains(&sy) && (0..d.w as isize).contains(&sx);
            let src = i as isize - s;
            !interior && (0..len).contains(&src)
        })
        .collect()
}

fn shift_suite(r: &mut VerifyReport, seed: u64) {
    const S: &str = "shift";
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);

    r.record(
        S,
        "address_vs_feature_map_shift",
        (|| {
            let mut compared = 0usize;
            for case in 0..500 {
                let d = random_dims(rng, 2, 16, 8);
                let x = random::<f32>(rng, d, 1)?;
                for dir in ShiftDirection::ALL {
                    let a = shift::address_shift(&x, dir)?.to_vec();
                    let f = shift::feature_map_shift_reference(&x, dir)?.to_vec();
                    let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != f[i]).collect();
                    if diff != predicted_boundary(d, dir) {
                        return Ok((
                            false,
                            format!("case {case} {d} {dir}: discrepancy set differs from boundary"),
                        ));
                    }
                    compared += 1;
                }
            }
            Ok((
                true,
                format!("{compared} tensor/direction pairs, discrepancies exactly on the boundary"),
            ))
        })(),
    );

    r.record(
        S,
        "channel_shift_permutation",
        (|| {
            for _ in 0..100 {
                let g = rng.random_range(1..=4);
                let d = Dims {
                    c: g * rng.random_range(1..=4),
                    ..random_dims(rng, 2, 1, 6)
                };
                let spec = ChannelShiftSpec::new(d.c, g)?;
                let x = TensorView::<f32>::alloc_with_reserve(d, 1, spec.shift_channels)?;
                x.write_dense(&random::<f32>(rng, d, 1)?.to_vec())?;
                let y = shift::channel_shift(&x, spec)?;
                for n in 0..d.n {
                    for k in 0..d.c {
                        let src = (k + spec.shift_channels) % d.c;
                        for i in 0..d.h {
                            for j in 0..d.w {
                                if y.get(n, k, i, j) != x.get(n, src, i, j) {
                                    return Ok((false, format!("{d} G={g}: channel {k} does not read {src}")));
                                }
                            }
                        }
                    }
                }
            }
            Ok((true, "100 random shapes: output channel k reads (k + s) mod C".into()))
        })(),
    );

    r.record(
        S,
        "copy_ratio_2g",
        (|| {
            let mut ratios = Vec::new();
            for (c, g) in [(16, 4), (24, 2), (36, 3), (48, 4), (96, 8)] {
                let d = Dims::new(1, c, 32, 32)?;
                let spec = ChannelShiftSpec::new(c, g)?;
                let x = TensorView::<f32>::alloc_with_reserve(d, 1, spec.shift_channels)?;
                shift::channel_shift(&x, spec)?;
                let shuffled = shift::channel_shuffle_reference(&x, g)?;
                let (a, b) = (shuffled.buffer().moves(), x.buffer().moves());
                if a != (2 * g) as u64 * b {
                    return Ok((false, format!("C={c} G={g}: shuffle {a} vs shift {b}")));
                }
                ratios.push(format!("G={g}:{}", a / b));
            }
            Ok((true, ratios.join(" ")))
        })(),
    );

    r.record(
        S,
        "view_ops_copy_nothing",
        (|| {
            for _ in 0..50 {
                let d = random_dims(rng, 2, 8, 8);
                let x = random::<f32>(rng, d, 1)?;
                let before = x.buffer().moves();
                for dir in ShiftDirection::ALL {
                    shift::address_shift(&x, dir)?;
                }
                let arena = shift::arena_plan::<f32>(d.n, d.h, d.w, &[d.c, d.c])?;
                shift::arena_concat(&arena);
                if x.buffer().moves() != before || arena.concat().buffer().moves() != 0 {
                    return Ok((false, format!("{d}: view op copied data")));
                }
            }
            Ok((true, "address_shift and arena_concat copied 0 elements".into()))
        })(),
    );

    r.record(
        S,
        "compose_cancels",
        (|| {
            let x = random::<f32>(rng, Dims::new(2, 3, 5, 5)?, 2)?;
            let y = shift::compose_shift(&x, ShiftDirection::Left, ShiftDirection::Right)?;
            Ok((y.to_vec() == x.to_vec(), "left then right restores the input".into()))
        })(),
    );

    r.record(
        S,
        "guard_untouched",
        (|| {
            let d = Dims::new(2, 8, 4, 4)?;
            let spec = ChannelShiftSpec::new(8, 4)?;
            let x = TensorView::<f32>::alloc_with_reserve(d, 1, spec.shift_channels)?;
            x.write_dense(&random::<f32>(rng, d, 1)?.to_vec())?;
            let y = shift::channel_shift(&x, spec)?;
            for dir in ShiftDirection::ALL {
                shift::address_shift(&y, dir)?;
            }
            Ok((x.buffer().guard_is_zero(), "guard margins still zero".into()))
        })(),
    );
}

fn fused_instance<T: Element>(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cg = rng.random_range(1..=4);
    let d = Dims {
        c: 4 * cg,
        ..random_dims(rng, 2, 1, 6)
    };
    let c_out = 4 * rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let f = FusedEnhancedSpec::for_channels(d.c)?;
    let x = TensorView::<T>::alloc_with_reserve(d, 1, f.shift_channels)?;
    x.write_dense(&random::<T>(rng, d, 1)?.to_vec())?;
    let w = (0..c_out * cg).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
    let b = (0..c_out).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
    let p = GroupConvParams::new(d.c, c_out, 4, 1, stride, w, Some(b))?;
    let fused = conv::fused_enhanced_gconv(&x, &p, &f)?;
    let composed = conv::composed_enhanced_reference(&x, &p, &f)?;
    Ok(max_abs_diff(&fused.to_vec(), &composed.to_vec()))
}

fn conv_suite(r: &mut VerifyReport, seed: u64) {
    const S: &str = "conv";
    let rng = &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));

    r.record(
        S,
        "fused_vs_composed_f32",
        (|| {
            let worst = (0..100)
                .map(|_| fused_instance::<f32>(rng))
                .collect::<Result<Vec<_>>>()?;
            let m = worst.into_iter().fold(0.0, f64::max);
            Ok((m <= 1e-5, format!("100 instances, max abs diff {m:.3e} (<= 1e-5)")))
        })(),
    );

    r.record(
        S,
        "fused_vs_composed_f64",
        (|| {
            let worst = (0..100)
                .map(|_| fused_instance::<f64>(rng))
                .collect::<Result<Vec<_>>>()?;
            let m = worst.into_iter().fold(0.0, f64::max);
            Ok((m <= 1e-12, format!("100 instances, max abs diff {m:.3e} (<= 1e-12)")))
        })(),
    );

    r.record(
        S,
        "fused_copies_less",
        (|| {
            let d = Dims::new(1, 16, 8, 8)?;
            let f = FusedEnhancedSpec::for_channels(16)?;
            let x = TensorView::<f32>::alloc_with_reserve(d, 1, f.shift_channels)?;
            let p = GroupConvParams::<f32>::msra(16, 16, 4, 1, 1, rng)?;
            let mut fused = GradTape::inference().with_move_log();
            fused.fused_enhanced("fused", &x, &p, &f, None)?;
            let mut composed = GradTape::inference().with_move_log();
            composed.composed_enhanced("composed", &x, &p, &f, None)?;
            let sum = |t: &GradTape<f32>| t.move_log().iter().map(|m| m.copied).sum::<u64>();
            let (a, b) = (sum(&fused), sum(&composed));
            Ok((a < b, format!("fused {a} vs composed {b} elements written")))
        })(),
    );

    r.record(
        S,
        "bn_fold",
        (|| {
            let d = Dims::new(2, 8, 5, 5)?;
            let x = random::<f64>(rng, d, 1)?;
            let p = GroupConvParams::<f64>::msra(8, 12, 4, 1, 1, rng)?;
            let rnd =
                |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (0..12).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
            let bn = BatchNormParams::new(
                rnd(rng, 0.5, 1.5),
                rnd(rng, -0.5, 0.5),
                rnd(rng, -0.5, 0.5),
                rnd(rng, 0.5, 2.0),
                conv::BN_EPS,
            )?;
            let reference = conv::batchnorm_infer(&conv::conv1x1_group(&x, &p)?, &bn)?;
            let folded = conv::conv1x1_group(&x, &conv::fold_bn(&p, &bn)?)?;
            let m = max_abs_diff(&reference.to_vec(), &folded.to_vec());
            Ok((m <= 1e-10, format!("max abs diff {m:.3e}")))
        })(),
    );

    r.record(
        S,
        "gconv_cost_formula",
        (|| {
            let p = GroupConvParams::<f32>::new(48, 48, 4, 1, 1, vec![0.0; 576], None)?;
            let (params, flops) = (p.weight_count(), p.macs(32, 32));
            Ok((
                params == 576 && flops == 589_824,
                format!("params {params}, multiply-adds {flops}"),
            ))
        })(),
    );
}

fn grad_suite(r: &mut VerifyReport, seed: u64) {
    const S: &str = "grad";
    for op in GradOp::ALL {
        let outcome = grad_check(op, seed).map(|rep| {
            (
                rep.passed(),
                format!("{} elements, max rel error {:.3e}", rep.checked, rep.max_rel_error),
            )
        });
        r.record(S, op.name(), outcome);
    }

    r.record(
        S,
        "channel_shift_exact",
        (|| {
            let rep = grad_check_with_step(GradOp::ChannelShift, seed, 1.0)?;
            Ok((
                rep.max_rel_error <= 1e-10,
                format!("max rel error {:.3e} (<= 1e-10)", rep.max_rel_error),
            ))
        })(),
    );

    r.record(
        S,
        "address_shift_guard_drop",
        (|| {
            let d = Dims::new(1, 2, 3, 3)?;
            let x = TensorView::<f64>::zeros(d)?;
            let mut tape = GradTape::recording();
            let y = tape.address_shift("right", &x, ShiftDirection::Right)?;
            let y = tape.materialize("copy", &y, None)?;
            let grads = tape.backward(Seed::View(&y, &vec![1.0; d.numel()]))?;
            let g = grads.wrt(&x);
            let mut expected = vec![1.0; d.numel()];
            expected[d.numel() - 1] = 0.0;
            let mass = g.iter().sum::<f64>() + grads.guard_mass(&x);
            Ok((
                g == expected && mass == d.numel() as f64,
                "sum-loss gradient is 1 except the flat-last element; mass conserved with guard".into(),
            ))
        })(),
    );
}

fn net_suite(r: &mut VerifyReport, seed: u64) {
    const S: &str = "net";
    let published: [(&str, f64, f64); 6] = [
        ("addressnet-20", 0.08e6, 21.8e6),
        ("addressnet-32", 0.14e6, 37.3e6),
        ("addressnet-44", 0.20e6, 52.8e6),
        ("enhanced-20", 0.18e6, 26.7e6),
        ("enhanced-32", 0.33e6, 48.0e6),
        ("enhanced-44", 0.47e6, 69.2e6),
    ];
    for (name, params, flops) in published {
        r.record(
            S,
            format!("{name}.costs"),
            (|| {
                let c = count_costs(&build_network(name)?)?;
                let (p, f) = (c.totals.params as f64, c.totals.flops as f64);
                let ok = (p / params - 1.0).abs() <= 0.10 && (f / flops - 1.0).abs() <= 0.10;
                Ok((ok, format!("{:.3}M params, {:.2}M multiply-adds", p / 1e6, f / 1e6)))
            })(),
        );
    }

    for (i, name) in NETWORK_NAMES.iter().filter(|n| **n != "enhanced-a").enumerate() {
        let seed = seed.wrapping_add(i as u64);
        r.record(
            S,
            format!("{name}.forward"),
            (|| {
                let spec = build_network(name)?;
                let net = Network::<f32>::new(&spec, seed)?;
                let rng = &mut ChaCha8Rng::seed_from_u64(seed);
                let x = random::<f32>(rng, Dims::new(2, 3, 32, 32)?, 1)?;
                let logits = net.forward(&x, &mut GradTape::inference(), BnMode::Train { momentum: 1.0 })?;
                let finite = logits.to_vec().iter().all(|v| v.is_finite());
                let shape_ok = logits.dims() == Dims::new(2, spec.classes, 1, 1)?;
                let folded = net.folded()?.forward(&x, &mut GradTape::inference(), BnMode::Infer)?;
                let m = max_abs_diff(&logits.to_vec(), &folded.to_vec());
                Ok((
                    finite && shape_ok && m <= 1e-4,
                    format!("logits {} finite; folded vs batch-stat max diff {m:.3e}", logits.dims()),
                ))
            })(),
        );

        r.record(
            S,
            format!("{name}.moves"),
            (|| {
                let spec = build_network(name)?;
                let mut net = Network::<f32>::new(&spec, seed)?;
                let rng = &mut ChaCha8Rng::seed_from_u64(seed);
                let x = random::<f32>(rng, Dims::new(2, 3, 32, 32)?, 1)?;
                let mut copied = Vec::new();
                for fusion in [true, false] {
                    net.set_fusion(fusion);
                    for (label, audit) in [
                        ("bn", movement_audit(&net, &x, BnMode::Infer)?),
                        ("folded", movement_audit(&net.folded()?, &x, BnMode::Infer)?),
                    ] {
                        if let Some(m) = audit.mismatches().first() {
                            return Ok((false, format!("fusion={fusion} {label}: {m}")));
                        }
                        copied.push(audit.measured_copied());
                    }
                }
                Ok((true, format!("measured == predicted; elements written {copied:?}")))
            })(),
        );
    }

    for name in ["enhanced-20", "enhanced-44"] {
        r.record(
            S,
            format!("{name}.fusion_equivalence"),
            (|| {
                let mut net = Network::<f32>::new(&build_network(name)?, seed)?;
                let rng = &mut ChaCha8Rng::seed_from_u64(seed);
                let x = random::<f32>(rng, Dims::new(2, 3, 32, 32)?, 1)?;
                let fused = net.forward(&x, &mut GradTape::inference(), BnMode::Infer)?;
                net.set_fusion(false);
                let composed = net.forward(&x, &mut GradTape::inference(), BnMode::Infer)?;
                let m = max_abs_diff(&fused.to_vec(), &composed.to_vec());
                Ok((m <= 1e-5, format!("max abs logit diff {m:.3e}")))
            })(),
        );
    }

    r.record(
        S,
        "enhanced-a.layout",
        (|| {
            let spec = build_network("enhanced-a")?;
            let expected = [(56, 96, 4), (28, 192, 5), (14, 384, 6), (7, 768, 4)];
            let shapes = spec.module_shapes();
            let mut k = 0;
            for (stage, (size, c, count)) in spec.stages.iter().zip(expected) {
                k += stage.modules.len();
                let last = shapes[k - 1];
                if stage.modules.len() != count
                    || last.h_out != size
                    || stage.modules.last().map(|m| m.c_out) != Some(c)
                {
                    return Ok((
                        false,
                        format!("{} does not match {size}x{size}x{c} x{count}", stage.name),
                    ));
                }
            }
            Ok((
                spec.stem_out() == (112, 112) && spec.classes == 1000,
                "stem 112x112x32, stages 56/28/14/7".into(),
            ))
        })(),
    );
}
