mod oracle;

use addrshift_core::autodiff::GradTape;
use addrshift_core::conv::{
    avg_pool, batchnorm_infer, composed_enhanced_reference, conv1x1_group, conv3x3, fold_bn, fused_enhanced_gconv,
    global_avg_pool, softmax_cross_entropy, BatchNormParams, FusedEnhancedSpec, GroupConvParams,
};
use addrshift_core::shift::{address_shift, channel_shift, concat_reference, ChannelShiftSpec};
use addrshift_core::{Dims, Element, TensorView};
use rand::Rng;

fn cast<T: Element>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

fn to_f64<T: Element>(t: &TensorView<T>) -> Vec<f64> {
    t.to_vec().iter().map(|v| v.as_f64()).collect()
}

struct Instance {
    d: Dims,
    reserve: usize,
    c_out: usize,
    x: Vec<f64>,
    w: Vec<f64>,
    b: Option<Vec<f64>>,
}

fn instance(rng: &mut rand_chacha::ChaCha8Rng) -> Instance {
    let d = Dims {
        n: rng.random_range(1..=2),
        c: 4 * rng.random_range(2..=6),
        h: rng.random_range(1..=7),
        w: rng.random_range(1..=7),
    };
    let c_out = 4 * rng.random_range(1..=4);
    let reserve = d.c / 8 + rng.random_range(0..=1);
    let x = oracle::uniform(rng, d.numel());
    let w = oracle::uniform(rng, c_out * d.c / 4);
    let b = rng.random_bool(0.5).then(|| oracle::uniform(rng, c_out));
    Instance {
        d,
        reserve,
        c_out,
        x,
        w,
        b,
    }
}

/// Fused kernel, library composition and oracle for one instance.
fn run<T: Element>(k: &Instance) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (fused, explicit, reference, composed) = run_all::<T>(k);
    assert_eq!(fused, composed);
    (fused, explicit, reference)
}

fn run_all<T: Element>(k: &Instance) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = GroupConvParams::<T>::new(k.d.c, k.c_out, 4, 1, 1, cast(&k.w), k.b.as_deref().map(cast)).unwrap();
    let f = FusedEnhancedSpec::for_channels(k.d.c).unwrap();
    let load = || {
        let t = TensorView::<T>::alloc_with_reserve(k.d, 1, k.reserve).unwrap();
        t.write_dense(&cast(&k.x)).unwrap();
        t
    };
    let fused = fused_enhanced_gconv(&load(), &p, &f).unwrap();

    // channel_shift -> per-group address_shift -> copy into one tensor -> grouped 1x1
    let shifted = channel_shift(&load(), ChannelShiftSpec::new(k.d.c, 4).unwrap()).unwrap();
    let cg = k.d.c / 4;
    let parts: Vec<_> = oracle::ENHANCED_DIRECTIONS
        .iter()
        .enumerate()
        .map(|(g, dir)| {
            let slice = shifted.slice_channels(g * cg, (g + 1) * cg).unwrap();
            address_shift(&slice, *dir).unwrap().materialize().unwrap()
        })
        .collect();
    let explicit = conv1x1_group(&concat_reference(&parts).unwrap(), &p).unwrap();

    let reference = oracle::enhanced_gconv(&k.x, k.d, k.reserve, &k.w, k.b.as_deref(), k.c_out);
    let composed = composed_enhanced_reference(&load(), &p, &f).unwrap();
    (to_f64(&fused), to_f64(&explicit), reference, to_f64(&composed))
}

#[test]
fn fused_enhanced_matches_composition_f64() {
    let rng = &mut oracle::rng(11);
    for _ in 0..100 {
        let k = instance(rng);
        let (fused, explicit, reference) = run::<f64>(&k);
        assert!(oracle::max_abs_diff(&fused, &explicit) <= 1e-12, "{}", k.d);
        assert!(oracle::max_abs_diff(&fused, &reference) <= 1e-12, "{}", k.d);
    }
}

#[test]
fn fused_enhanced_matches_composition_f32() {
    let rng = &mut oracle::rng(12);
    for _ in 0..100 {
        let k = instance(rng);
        let (fused, explicit, reference) = run::<f32>(&k);
        assert!(oracle::max_abs_diff(&fused, &explicit) <= 1e-5, "{}", k.d);
        assert!(oracle::max_abs_diff(&fused, &reference) <= 1e-5, "{}", k.d);
    }
}

#[test]
fn fused_copies_only_the_half_group() {
    let d = Dims::new(2, 16, 6, 6).unwrap();
    let p = GroupConvParams::<f64>::new(16, 16, 4, 1, 1, vec![0.5; 64], None).unwrap();
    let f = FusedEnhancedSpec::for_channels(16).unwrap();
    let moves = |composed: bool| {
        let t = TensorView::<f64>::alloc_with_reserve(d, 1, 2).unwrap();
        let mut tape = GradTape::inference().with_move_log();
        if composed {
            tape.composed_enhanced("g", &t, &p, &f, None).unwrap();
        } else {
            tape.fused_enhanced("g", &t, &p, &f, None).unwrap();
        }
        tape.move_log().iter().map(|m| m.copied).sum::<u64>()
    };
    let shift = (d.n * 2 * d.plane()) as u64;
    let out = d.numel() as u64;
    assert_eq!(moves(false), shift + out);
    // the composed path additionally writes every shifted element into the arena
    assert_eq!(moves(true), shift + 2 * out);
}

#[test]
fn grouped_pointwise_matches_oracle() {
    let rng = &mut oracle::rng(3);
    for _ in 0..30 {
        let g = rng.random_range(1..=4);
        let d = Dims {
            n: 2,
            c: g * rng.random_range(1..=4),
            h: 3,
            w: 4,
        };
        let c_out = g * rng.random_range(1..=3);
        let x = oracle::uniform(rng, d.numel());
        let w = oracle::uniform(rng, c_out * d.c / g);
        let b = oracle::uniform(rng, c_out);
        let p = GroupConvParams::<f64>::new(d.c, c_out, g, 1, 1, w.clone(), Some(b.clone())).unwrap();
        let y = conv1x1_group(&TensorView::from_vec(d, x.clone(), 1).unwrap(), &p).unwrap();
        assert!(oracle::max_abs_diff(&y.to_vec(), &oracle::group_conv1x1(&x, d, &w, Some(&b), c_out, g)) <= 1e-12);
    }
}

fn naive_conv3x3(x: &[f64], d: Dims, w: &[f64], c_out: usize, g: usize, stride: usize) -> Vec<f64> {
    let (cin_g, cout_g) = (d.c / g, c_out / g);
    let (ho, wo) = (d.h.div_ceil(stride), d.w.div_ceil(stride));
    let mut out = vec![0.0; d.n * c_out * ho * wo];
    for n in 0..d.n {
        for o in 0..c_out {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..cin_g {
                        let ci = (o / cout_g) * cin_g + i;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = (y * stride + ky) as isize - 1;
                                let sx = (xx * stride + kx) as isize - 1;
                                if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                                    continue;
                                }
                                acc += w[((o * cin_g + i) * 3 + ky) * 3 + kx]
                                    * x[((n * d.c + ci) * d.h + sy as usize) * d.w + sx as usize];
                            }
                        }
                    }
                    out[((n * c_out + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv3x3_matches_oracle() {
    let rng = &mut oracle::rng(5);
    for stride in [1, 2] {
        for c_out in [1, 4] {
            let (g, d) = (1, Dims { n: 2, c: 3, h: 5, w: 6 });
            let x = oracle::uniform(rng, d.numel());
            let w = oracle::uniform(rng, c_out * 3 * 9);
            let p = GroupConvParams::<f64>::new(d.c, c_out, g, 3, stride, w.clone(), None).unwrap();
            let y = conv3x3(&TensorView::from_vec(d, x.clone(), 1).unwrap(), &p).unwrap();
            assert!(oracle::max_abs_diff(&y.to_vec(), &naive_conv3x3(&x, d, &w, c_out, g, stride)) <= 1e-12);
        }
    }
}

#[test]
fn folded_conv_equals_conv_then_bn() {
    let rng = &mut oracle::rng(9);
    let d = Dims::new(2, 8, 4, 4).unwrap();
    let x = TensorView::from_vec(d, oracle::uniform(rng, d.numel()), 1).unwrap();
    let p =
        GroupConvParams::<f64>::new(8, 12, 2, 1, 1, oracle::uniform(rng, 48), Some(oracle::uniform(rng, 12))).unwrap();
    let bn = BatchNormParams::new(
        oracle::uniform(rng, 12),
        oracle::uniform(rng, 12),
        oracle::uniform(rng, 12),
        (0..12).map(|_| rng.random_range(0.1..2.0)).collect(),
        1e-5,
    )
    .unwrap();
    let unfused = batchnorm_infer(&conv1x1_group(&x, &p).unwrap(), &bn).unwrap();
    let folded = conv1x1_group(&x, &fold_bn(&p, &bn).unwrap()).unwrap();
    assert!(oracle::max_abs_diff(&unfused.to_vec(), &folded.to_vec()) <= 1e-12);
}

#[test]
fn bn_infer_is_the_affine_map() {
    // gamma 2, beta 1, mean 3, var 4 -> y = 2 (x - 3) / sqrt(4 + eps) + 1
    let bn = BatchNormParams::<f64>::new(vec![2.0], vec![1.0], vec![3.0], vec![4.0], 1e-5).unwrap();
    let x = TensorView::from_vec(Dims::new(1, 1, 1, 2).unwrap(), vec![3.0, 5.0], 1).unwrap();
    let y = batchnorm_infer(&x, &bn).unwrap().to_vec();
    assert_eq!(y[0], 1.0);
    assert!((y[1] - (1.0 + 4.0 / (4.0f64 + 1e-5).sqrt())).abs() < 1e-15);
}

#[test]
fn pooling_averages() {
    let d = Dims::new(1, 1, 2, 4).unwrap();
    let x = TensorView::from_vec(d, vec![1.0, 3.0, 5.0, 7.0, 3.0, 5.0, 7.0, 9.0], 1).unwrap();
    assert_eq!(avg_pool(&x, 2, 2).unwrap().to_vec(), vec![3.0, 7.0]);
    assert_eq!(global_avg_pool(&x).unwrap().to_vec(), vec![5.0]);
}

#[test]
fn uniform_logits_cost_ln_k() {
    let logits = TensorView::<f64>::zeros(Dims::new(2, 5, 1, 1).unwrap()).unwrap();
    let (loss, probs) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-15);
    assert!(probs.iter().all(|p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn mac_formula() {
    let p = GroupConvParams::<f32>::new(64, 64, 4, 1, 1, vec![0.0; 64 * 16], None).unwrap();
    assert_eq!(p.weight_count(), 1024);
    assert_eq!(p.macs(32, 32), 64 * 16 * 32 * 32);
}
