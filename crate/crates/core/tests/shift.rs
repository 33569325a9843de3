mod oracle;

use addrshift_core::shift::{
    address_shift, arena_plan, channel_shift, channel_shuffle_reference, compose_shift, concat_reference,
    feature_map_shift_reference, residual_add, ChannelShiftSpec, ShiftDirection,
};
use addrshift_core::verify::predicted_boundary;
use addrshift_core::{Dims, Error, TensorView};
use proptest::prelude::*;

fn view(d: Dims, values: &[f64], guard_rows: usize) -> TensorView<f64> {
    TensorView::from_vec(d, values.to_vec(), guard_rows).unwrap()
}

fn dims() -> impl Strategy<Value = Dims> {
    (1usize..=2, 1usize..=16, 1usize..=8, 1usize..=8).prop_map(|(n, c, h, w)| Dims { n, c, h, w })
}

fn dir() -> impl Strategy<Value = ShiftDirection> {
    prop::sample::select(ShiftDirection::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn address_shift_is_flat_offset(d in dims(), dir in dir(), seed in any::<u64>()) {
        let x = oracle::nonzero_values(&mut oracle::rng(seed), d.numel());
        let t = view(d, &x, 1);
        let y = address_shift(&t, dir).unwrap();
        prop_assert!(y.shares_buffer(&t));
        prop_assert_eq!(t.buffer().moves(), 0);
        prop_assert_eq!(y.to_vec(), oracle::flat_shift(&x, d, dir));
    }

    #[test]
    fn address_shift_differs_from_zero_padding_only_on_live_boundary(
        d in dims(), dir in dir(), seed in any::<u64>()
    ) {
        let x = oracle::nonzero_values(&mut oracle::rng(seed), d.numel());
        let y = address_shift(&view(d, &x, 1), dir).unwrap().to_vec();
        let z = oracle::zero_pad_shift(&x, d, dir);
        let diff: Vec<usize> = (0..d.numel()).filter(|&i| y[i] != z[i]).collect();
        let step = dir.offset(d.w);
        let live: Vec<usize> = oracle::boundary(d, dir)
            .into_iter()
            .filter(|&i| (0..d.numel() as isize).contains(&(i as isize - step)))
            .collect();
        prop_assert_eq!(&diff, &live);
        prop_assert_eq!(predicted_boundary(d, dir), live);
    }

    #[test]
    fn feature_map_shift_matches_zero_padding(d in dims(), dir in dir(), seed in any::<u64>()) {
        let x = oracle::uniform(&mut oracle::rng(seed), d.numel());
        let y = feature_map_shift_reference(&view(d, &x, 1), dir).unwrap();
        prop_assert_eq!(y.to_vec(), oracle::zero_pad_shift(&x, d, dir));
    }

    #[test]
    fn channel_shift_is_rotation(n in 1usize..=3, g in 1usize..=4, per in 2usize..=6, hw in 1usize..=5, seed in any::<u64>()) {
        let d = Dims { n, c: g * per, h: hw, w: hw + 1 };
        let x = oracle::uniform(&mut oracle::rng(seed), d.numel());
        let spec = ChannelShiftSpec::new(d.c, g).unwrap();
        let t = TensorView::<f64>::alloc_with_reserve(d, 1, spec.shift_channels).unwrap();
        t.write_dense(&x).unwrap();
        let before = t.buffer().moves();
        let y = channel_shift(&t, spec).unwrap();
        prop_assert!(y.shares_buffer(&t));
        prop_assert_eq!(t.buffer().moves() - before, (n * spec.shift_channels * d.plane()) as u64);
        prop_assert_eq!(y.to_vec(), oracle::rotate_channels(&x, d, per / 2));
    }

    #[test]
    fn shuffle_matches_transpose(n in 1usize..=2, g in 1usize..=5, per in 1usize..=5, hw in 1usize..=4, seed in any::<u64>()) {
        let d = Dims { n, c: g * per, h: hw, w: hw };
        let x = oracle::uniform(&mut oracle::rng(seed), d.numel());
        let t = view(d, &x, 1);
        let y = channel_shuffle_reference(&t, g).unwrap();
        prop_assert!(!y.shares_buffer(&t));
        prop_assert_eq!(y.buffer().moves() + t.buffer().moves(), d.numel() as u64);
        prop_assert_eq!(y.to_vec(), oracle::shuffle(&x, d, g));
    }

    #[test]
    fn opposite_shifts_cancel(d in dims(), dir in dir(), seed in any::<u64>()) {
        let x = oracle::uniform(&mut oracle::rng(seed), d.numel());
        let t = view(d, &x, 1);
        let y = compose_shift(&t, dir, dir.opposite()).unwrap();
        prop_assert_eq!(y.offset(), t.offset());
        prop_assert_eq!(y.to_vec(), x);
    }

    #[test]
    fn shifts_never_touch_the_guard(d in dims(), seed in any::<u64>()) {
        let x = oracle::uniform(&mut oracle::rng(seed), d.numel());
        let t = view(d, &x, 2);
        for a in ShiftDirection::ALL {
            let y = address_shift(&t, a).unwrap();
            let _ = y.to_vec();
            for b in ShiftDirection::ALL.into_iter().filter(|b| *b != a) {
                let _ = compose_shift(&t, a, b).unwrap().to_vec();
            }
        }
        prop_assert!(t.buffer().guard_is_zero());
        prop_assert_eq!(t.buffer().moves(), 0);
    }

    #[test]
    fn arena_concat_equals_copying_concat(n in 1usize..=2, slots in prop::collection::vec(1usize..=5, 1..=4), hw in 1usize..=4, seed in any::<u64>()) {
        let rng = &mut oracle::rng(seed);
        let arena = arena_plan::<f64>(n, hw, hw, &slots).unwrap();
        let mut parts = Vec::new();
        for (i, &c) in slots.iter().enumerate() {
            let d = Dims { n, c, h: hw, w: hw };
            let part = view(d, &oracle::uniform(rng, d.numel()), 1);
            arena.slot(i).unwrap().write_dense(&part.to_vec()).unwrap();
            parts.push(part);
        }
        let written = arena.concat().buffer().moves();
        let whole = arena.concat();
        prop_assert_eq!(whole.buffer().moves(), written);
        prop_assert_eq!(whole.to_vec(), concat_reference(&parts).unwrap().to_vec());
    }
}

#[test]
fn right_then_down_reads_w_plus_one_back() {
    let d = Dims::new(1, 2, 3, 4).unwrap();
    let x: Vec<f64> = (0..d.numel()).map(|i| i as f64 + 1.0).collect();
    let t = view(d, &x, 2);
    let y = compose_shift(&t, ShiftDirection::Right, ShiftDirection::Down).unwrap();
    let expected: Vec<f64> = (0..d.numel() as isize)
        .map(|i| if i >= 5 { x[(i - 5) as usize] } else { 0.0 })
        .collect();
    assert_eq!(y.to_vec(), expected);
}

#[test]
fn repeated_direction_is_rejected() {
    let t = TensorView::<f64>::zeros(Dims::new(1, 1, 3, 3).unwrap()).unwrap();
    assert!(matches!(
        compose_shift(&t, ShiftDirection::Up, ShiftDirection::Up),
        Err(Error::InvalidComposition { .. })
    ));
}

#[test]
fn right_shift_wraps_rows() {
    // 1x1x2x3 [[1,2,3],[4,5,6]] shifted right reads [[0,1,2],[3,4,5]]
    let d = Dims::new(1, 1, 2, 3).unwrap();
    let t = view(d, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 1);
    let y = address_shift(&t, ShiftDirection::Right).unwrap();
    assert_eq!(y.to_vec(), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
}

#[test]
fn channel_shift_needs_reserve() {
    let d = Dims::new(2, 8, 2, 2).unwrap();
    let t = TensorView::<f64>::alloc(d, 1).unwrap();
    assert!(channel_shift(&t, ChannelShiftSpec::new(8, 2).unwrap()).is_err());
}

#[test]
fn channel_shift_copies_two_g_times_less_than_shuffle() {
    for (c, g) in [(16, 4), (24, 2), (36, 3), (48, 4), (96, 8)] {
        let d = Dims::new(2, c, 5, 5).unwrap();
        let spec = ChannelShiftSpec::new(c, g).unwrap();
        let t = TensorView::<f64>::alloc_with_reserve(d, 1, spec.shift_channels).unwrap();
        let shifted = channel_shift(&t, spec).unwrap();
        let shift_copies = shifted.buffer().moves();
        let x = TensorView::<f64>::zeros(d).unwrap();
        let shuffled = channel_shuffle_reference(&x, g).unwrap();
        let shuffle_copies = shuffled.buffer().moves() + x.buffer().moves();
        assert_eq!(shuffle_copies, 2 * g as u64 * shift_copies, "C={c} G={g}");
    }
}

#[test]
fn residual_add_is_elementwise() {
    let d = Dims::new(1, 2, 2, 2).unwrap();
    let a = view(d, &[1.0; 8], 1);
    let b = TensorView::<f64>::from_fn(d, |i| i as f64).unwrap();
    let y = residual_add(&a, &b).unwrap();
    assert_eq!(y.to_vec(), (0..8).map(|i| i as f64 + 1.0).collect::<Vec<_>>());
}
