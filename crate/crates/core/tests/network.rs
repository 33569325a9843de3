mod oracle;

use addrshift_core::analyzer::{count_costs, movement_audit, plan_costs, OpKind};
use addrshift_core::autodiff::GradTape;
use addrshift_core::network::{
    build_network, AddressModule, BnMode, ModuleConfig, ModuleVariant, Network, Shortcut, NETWORK_NAMES,
};
use addrshift_core::{Dims, TensorView};
use rand::Rng;

const PUBLISHED: [(&str, f64, f64); 6] = [
    ("addressnet-20", 0.08e6, 21.8e6),
    ("addressnet-32", 0.14e6, 37.3e6),
    ("addressnet-44", 0.20e6, 52.8e6),
    ("enhanced-20", 0.18e6, 26.7e6),
    ("enhanced-32", 0.33e6, 48.0e6),
    ("enhanced-44", 0.47e6, 69.2e6),
];

fn cifar_input(n: usize, seed: u64) -> TensorView<f32> {
    let d = Dims::new(n, 3, 32, 32).unwrap();
    let v = oracle::uniform(&mut oracle::rng(seed), d.numel());
    TensorView::from_vec(d, v.iter().map(|&x| x as f32).collect(), 1).unwrap()
}

#[test]
fn published_params_and_macs_within_ten_percent() {
    for (name, params, macs) in PUBLISHED {
        let t = count_costs(&build_network(name).unwrap()).unwrap().totals;
        assert!(
            (t.params as f64 / params - 1.0).abs() <= 0.10,
            "{name} params {}",
            t.params
        );
        assert!((t.flops as f64 / macs - 1.0).abs() <= 0.10, "{name} macs {}", t.flops);
    }
}

#[test]
fn analyzer_params_equal_built_weights_minus_bn() {
    for name in NETWORK_NAMES {
        let spec = build_network(name).unwrap();
        let net = Network::<f32>::new(&spec, 0).unwrap();
        let mut bn = 0;
        net.for_each_bn(|b| bn += 2 * b.channels());
        assert_eq!(
            count_costs(&spec).unwrap().totals.params as usize,
            net.parameter_count() - bn,
            "{name}"
        );
    }
}

#[test]
fn depths_match_names() {
    for (name, depth) in [("addressnet-20", 20), ("addressnet-32", 32), ("enhanced-44", 44)] {
        assert_eq!(build_network(name).unwrap().depth(), depth);
    }
}

#[test]
fn enhanced_a_stage_layout() {
    let spec = build_network("enhanced-a").unwrap();
    assert_eq!(spec.stem.c_out, 32);
    assert_eq!(spec.stem_out(), (112, 112));
    assert_eq!(spec.classes, 1000);
    let rows: Vec<(usize, usize, usize)> = spec
        .modules()
        .map(|(_, _, m)| (m.c_out, m.stride, m.expansion))
        .collect();
    let mut expected = Vec::new();
    for (c, runs) in [
        (96, [(2, 4, 1), (1, 3, 3)]),
        (192, [(2, 3, 1), (1, 2, 4)]),
        (384, [(2, 2, 1), (1, 2, 5)]),
        (768, [(2, 2, 1), (1, 2, 3)]),
    ] {
        for (stride, e, repeat) in runs {
            expected.extend(std::iter::repeat_n((c, stride, e), repeat));
        }
    }
    assert_eq!(rows, expected);
    let sizes: Vec<usize> = spec.module_shapes().iter().map(|s| s.h_out).collect();
    assert_eq!(sizes, [[56; 4].as_slice(), &[28; 5], &[14; 6], &[7; 4]].concat());
    assert!(spec
        .modules()
        .all(|(_, _, m)| m.variant == ModuleVariant::AddressEnhanced));
}

#[test]
fn zero_branch_module_is_identity() {
    for variant in [ModuleVariant::AddressBased, ModuleVariant::AddressEnhanced] {
        let c = if variant == ModuleVariant::AddressBased { 48 } else { 96 };
        let cfg = ModuleConfig {
            variant,
            c_in: c,
            c_out: c,
            expansion: 3,
            stride: 1,
        };
        assert_eq!(cfg.shortcut(), Shortcut::Add);
        let m = AddressModule::<f64>::new("m", cfg, &mut oracle::rng(0)).unwrap();
        m.gconv2.conv.weight.update(|_, _| 0.0);
        let d = Dims::new(2, c, 4, 4).unwrap();
        let x = TensorView::from_vec(d, oracle::uniform(&mut oracle::rng(1), d.numel()), 1).unwrap();
        let y = m
            .forward(&x, None, &mut GradTape::inference(), BnMode::Infer, true)
            .unwrap();
        assert_eq!(y.to_vec(), x.to_vec(), "{variant:?}");
    }
}

fn randomize_bn(net: &Network<f32>, seed: u64) {
    let rng = &mut oracle::rng(seed);
    net.for_each_bn(|bn| {
        bn.gamma.update(|_, _| rng.random_range(0.5..1.5));
        bn.beta.update(|_, _| rng.random_range(-0.3..0.3));
    });
}

#[test]
fn folded_inference_matches_batch_statistics() {
    for (i, (name, _, _)) in PUBLISHED.iter().enumerate() {
        let net = Network::<f32>::new(&build_network(name).unwrap(), i as u64).unwrap();
        randomize_bn(&net, i as u64);
        let x = cifar_input(2, 100 + i as u64);
        let train = net
            .forward(&x, &mut GradTape::inference(), BnMode::Train { momentum: 1.0 })
            .unwrap();
        let folded = net
            .folded()
            .unwrap()
            .forward(&x, &mut GradTape::inference(), BnMode::Infer)
            .unwrap();
        let to64 = |t: &TensorView<f32>| t.to_vec().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let diff = oracle::max_abs_diff(&to64(&train), &to64(&folded));
        assert!(diff <= 1e-4, "{name}: {diff:e}");
    }
}

#[test]
fn fusion_does_not_change_logits() {
    for name in ["enhanced-20", "enhanced-32"] {
        let mut net = Network::<f32>::new(&build_network(name).unwrap(), 5).unwrap();
        let x = cifar_input(1, 6);
        let fused = net
            .forward(&x, &mut GradTape::inference(), BnMode::Infer)
            .unwrap()
            .to_vec();
        net.set_fusion(false);
        let composed = net
            .forward(&x, &mut GradTape::inference(), BnMode::Infer)
            .unwrap()
            .to_vec();
        assert_eq!(fused, composed, "{name}");
    }
}

#[test]
fn measured_moves_equal_predicted() {
    for name in ["addressnet-20", "enhanced-20"] {
        let mut net = Network::<f32>::new(&build_network(name).unwrap(), 1).unwrap();
        let x = cifar_input(2, 2);
        for fusion in [true, false] {
            net.set_fusion(fusion);
            let audit = movement_audit(&net, &x, BnMode::Infer).unwrap();
            assert!(audit.matches(), "{name} fusion={fusion}: {:?}", audit.mismatches());
            let audit = movement_audit(&net.folded().unwrap(), &x, BnMode::Infer).unwrap();
            assert!(
                audit.matches(),
                "{name} folded fusion={fusion}: {:?}",
                audit.mismatches()
            );
        }
    }
}

#[test]
fn shift_layers_copy_less_than_they_transform() {
    for name in NETWORK_NAMES {
        let report = plan_costs(&build_network(name).unwrap(), 1, false, false).unwrap();
        let shifts: Vec<_> = report.layers.iter().filter(|l| l.kind == OpKind::Shift).collect();
        assert!(!shifts.is_empty(), "{name}");
        for l in shifts {
            assert!(l.copied < l.transformed, "{name} {}", l.layer);
        }
    }
}

#[test]
fn concat_costs_nothing() {
    let report = count_costs(&build_network("addressnet-20").unwrap()).unwrap();
    let concats: Vec<_> = report.layers.iter().filter(|l| l.kind == OpKind::Concat).collect();
    assert_eq!(concats.len(), 3);
    assert!(concats.iter().all(|l| l.copied == 0));
}

#[test]
fn odd_downsample_is_rejected() {
    let spec = build_network("addressnet-20").unwrap().with_input(30, 30);
    assert!(spec.validate().is_err());
}
