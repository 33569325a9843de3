//! Naive data-moving oracles on plain NCHW slices. Nothing here calls into
//! the crate under test except for the `Dims`/`ShiftDirection` value types.

#![allow(dead_code)]

use addrshift_core::shift::ShiftDirection;
use addrshift_core::Dims;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values in `[-2, -1] ∪ [1, 2]`, so no element is accidentally zero.
pub fn nonzero_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(1.0..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_dims(rng: &mut ChaCha8Rng, max_n: usize, max_c: usize, max_hw: usize) -> Dims {
    Dims {
        n: rng.random_range(1..=max_n),
        c: rng.random_range(1..=max_c),
        h: rng.random_range(1..=max_hw),
        w: rng.random_range(1..=max_hw),
    }
}

fn unit(dir: ShiftDirection) -> (isize, isize) {
    match dir {
        ShiftDirection::Right => (0, 1),
        ShiftDirection::Left => (0, -1),
        ShiftDirection::Down => (1, 0),
        ShiftDirection::Up => (-1, 0),
    }
}

fn flat_step(dir: ShiftDirection, w: usize) -> isize {
    let (dy, dx) = unit(dir);
    dy * w as isize + dx
}

/// Zero-padded shift: output `(y, x)` takes input `(y - dy, x - dx)`.
pub fn zero_pad_shift(x: &[f64], d: Dims, dir: ShiftDirection) -> Vec<f64> {
    let (dy, dx) = unit(dir);
    let mut out = vec![0.0; x.len()];
    for p in 0..d.n * d.c {
        for y in 0..d.h as isize {
            for xx in 0..d.w as isize {
                let (sy, sx) = (y - dy, xx - dx);
                if sy >= 0 && sy < d.h as isize && sx >= 0 && sx < d.w as isize {
                    out[p * d.h * d.w + (y as usize) * d.w + xx as usize] =
                        x[p * d.h * d.w + (sy as usize) * d.w + sx as usize];
                }
            }
        }
    }
    out
}

/// Address-arithmetic shift of a dense tensor: flat output `i` reads flat
/// input `i - step`, zero outside the tensor.
pub fn flat_shift(x: &[f64], d: Dims, dir: ShiftDirection) -> Vec<f64> {
    let step = flat_step(dir, d.w);
    (0..x.len() as isize)
        .map(|i| {
            let src = i - step;
            if src >= 0 && (src as usize) < x.len() {
                x[src as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// Flat positions whose 2-D source falls off the plane.
pub fn boundary(d: Dims, dir: ShiftDirection) -> Vec<usize> {
    let (dy, dx) = unit(dir);
    (0..d.numel())
        .filter(|&i| {
            let y = ((i / d.w) % d.h) as isize;
            let x = (i % d.w) as isize;
            let (sy, sx) = (y - dy, x - dx);
            sy < 0 || sy >= d.h as isize || sx < 0 || sx >= d.w as isize
        })
        .collect()
}

/// ShuffleNet shuffle by reshape `(G, C/G)` and transpose.
pub fn shuffle(x: &[f64], d: Dims, g: usize) -> Vec<f64> {
    let per = d.c / g;
    let hw = d.h * d.w;
    let mut out = vec![0.0; x.len()];
    for n in 0..d.n {
        for gi in 0..g {
            for i in 0..per {
                let src = (n * d.c + gi * per + i) * hw;
                let dst = (n * d.c + i * g + gi) * hw;
                out[dst..dst + hw].copy_from_slice(&x[src..src + hw]);
            }
        }
    }
    out
}

/// Channel `k` of the output is channel `(k + s) mod C` of the input.
pub fn rotate_channels(x: &[f64], d: Dims, s: usize) -> Vec<f64> {
    let hw = d.h * d.w;
    let mut out = vec![0.0; x.len()];
    for n in 0..d.n {
        for k in 0..d.c {
            let src = (n * d.c + (k + s) % d.c) * hw;
            let dst = (n * d.c + k) * hw;
            out[dst..dst + hw].copy_from_slice(&x[src..src + hw]);
        }
    }
    out
}

/// Grouped 1x1 convolution, weights `(c_out, c_in/G)`.
pub fn group_conv1x1(x: &[f64], d: Dims, w: &[f64], bias: Option<&[f64]>, c_out: usize, g: usize) -> Vec<f64> {
    let (cin_g, cout_g, hw) = (d.c / g, c_out / g, d.h * d.w);
    let mut out = vec![0.0; d.n * c_out * hw];
    for n in 0..d.n {
        for o in 0..c_out {
            let grp = o / cout_g;
            for p in 0..hw {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for i in 0..cin_g {
                    acc += w[o * cin_g + i] * x[(n * d.c + grp * cin_g + i) * hw + p];
                }
                out[(n * c_out + o) * hw + p] = acc;
            }
        }
    }
    out
}

/// Directions of the four groups of the enhanced group convolution.
pub const ENHANCED_DIRECTIONS: [ShiftDirection; 4] = [
    ShiftDirection::Left,
    ShiftDirection::Up,
    ShiftDirection::Right,
    ShiftDirection::Down,
];

/// The enhanced group convolution evaluated on a simulated buffer: each
/// image slab holds its `C` planes followed by `reserve` spare planes, the
/// first `s = C/8` of which receive copies of planes `0..s`. Channel `k` of
/// the shifted tensor is slab plane `k + s`; group `g`'s address shift reads
/// `step` elements earlier in the flat buffer, zero outside it.
pub fn enhanced_gconv(x: &[f64], d: Dims, reserve: usize, w: &[f64], bias: Option<&[f64]>, c_out: usize) -> Vec<f64> {
    let hw = d.h * d.w;
    let s = d.c / 4 / 2;
    assert!(reserve >= s);
    let slab = (d.c + reserve) * hw;
    let mut mem = vec![0.0; d.n * slab];
    for n in 0..d.n {
        mem[n * slab..n * slab + d.c * hw].copy_from_slice(&x[n * d.c * hw..(n + 1) * d.c * hw]);
        mem.copy_within(n * slab..n * slab + s * hw, n * slab + d.c * hw);
    }
    let read = |q: isize| {
        if q >= 0 && (q as usize) < mem.len() {
            mem[q as usize]
        } else {
            0.0
        }
    };
    let cg = d.c / 4;
    let mut gathered = vec![0.0; x.len()];
    for n in 0..d.n {
        for k in 0..d.c {
            let step = flat_step(ENHANCED_DIRECTIONS[k / cg], d.w);
            for p in 0..hw {
                let q = (n * slab + (k + s) * hw + p) as isize - step;
                gathered[(n * d.c + k) * hw + p] = read(q);
            }
        }
    }
    group_conv1x1(&gathered, d, w, bias, c_out, 4)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
