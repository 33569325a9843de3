//! Channel shift, address shift and shortcut shift, plus the data-moving
//! baselines they replace (channel shuffle, feature-map shift, explicit
//! concatenation, additive residual).

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dims, Element, TensorView};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShiftDirection {
    Left,
    Right,
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Horizontal,
    Vertical,
}

impl ShiftDirection {
    pub const ALL: [ShiftDirection; 4] = [Self::Left, Self::Right, Self::Up, Self::Down];

    /// Address offset `s_d` for a row of `width` elements: right +1, left -1,
    /// up -W, down +W. A shifted view reads from `p - s_d`.
    pub fn offset(self, width: usize) -> isize {
        let w = width as isize;
        match self {
            Self::Right => 1,
            Self::Left => -1,
            Self::Up => -w,
            Self::Down => w,
        }
    }

    /// Unit displacement `(dy, dx)` of the content.
    pub fn displacement(self) -> (isize, isize) {
        match self {
            Self::Right => (0, 1),
            Self::Left => (0, -1),
            Self::Up => (-1, 0),
            Self::Down => (1, 0),
        }
    }

    pub fn axis(self) -> Axis {
        match self {
            Self::Left | Self::Right => Axis::Horizontal,
            Self::Up | Self::Down => Axis::Vertical,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Self::Right => Self::Left,
            Self::Left => Self::Right,
            Self::Up => Self::Down,
            Self::Down => Self::Up,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Left => "left",
            Self::Right => "right",
            Self::Up => "up",
            Self::Down => "down",
        }
    }
}

impl fmt::Display for ShiftDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelShiftSpec {
    pub groups: usize,
    pub shift_channels: usize,
}

impl ChannelShiftSpec {
    /// Half a group: `floor((C / G) / 2)` channels.
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::NotDivisible {
                what: "channels",
                value: channels,
                by: groups,
            });
        }
        Ok(Self {
            groups,
            shift_channels: channels / groups / 2,
        })
    }

    pub fn with_shift(groups: usize, shift_channels: usize) -> Self {
        Self { groups, shift_channels }
    }
}

/// Circularly shifts the channel axis toward lower indices by
/// `spec.shift_channels`: output channel `k` reads input channel
/// `(k + s) mod C`.
///
/// Only the first `s` channels of every image are copied, into the spare
/// planes that follow the image (see [`TensorView::alloc_with_reserve`]);
/// the result is a view advanced by `s` planes.
pub fn channel_shift<T: Element>(t: &TensorView<T>, spec: ChannelShiftSpec) -> Result<TensorView<T>> {
    let d = t.dims();
    if !t.is_row_major() {
        return Err(Error::NotDense { op: "channel_shift" });
    }
    if spec.groups == 0 || !d.c.is_multiple_of(spec.groups) {
        return Err(Error::NotDivisible {
            what: "channels",
            value: d.c,
            by: spec.groups,
        });
    }
    let s = spec.shift_channels;
    if s == 0 {
        return Ok(t.clone());
    }
    if s >= d.c {
        return Err(Error::InvalidArgument(format!(
            "shift of {s} channels needs fewer than {} channels",
            d.c
        )));
    }
    let plane = d.plane();
    let len = t.buffer().len() as isize;
    let span = (s * plane) as isize;
    for n in 0..d.n {
        let dst = t.plane_start(n, d.c);
        let limit = if n + 1 < d.n {
            t.plane_start(n + 1, 0).min(len)
        } else {
            len
        };
        if dst < 0 || dst + span > limit {
            return Err(Error::InsufficientReserve {
                image: n,
                needed: s * plane,
                available: (limit - dst).max(0) as usize,
            });
        }
    }
    {
        let mut data = t.buffer().write();
        for n in 0..d.n {
            data.copy_within(t.plane_start(n, 0), s * plane, t.plane_start(n, d.c));
        }
    }
    t.buffer().add_moves(s * d.n * plane);
    t.view_offset(span)
}

/// ShuffleNet channel shuffle: output channel `g + i*G` is input channel
/// `i + g*(C/G)`. Always copies the whole tensor.
pub fn channel_shuffle_reference<T: Element>(t: &TensorView<T>, groups: usize) -> Result<TensorView<T>> {
    let d = t.dims();
    if groups == 0 || !d.c.is_multiple_of(groups) {
        return Err(Error::NotDivisible {
            what: "channels",
            value: d.c,
            by: groups,
        });
    }
    let out = TensorView::alloc(d.with_channels(d.c), 1)?;
    out.write_dense(&gather(t, &shuffle_source_map(d, groups)))?;
    Ok(out)
}

/// Input element (dense NCHW index) read by every output element of a
/// channel shuffle.
pub(crate) fn shuffle_source_map(d: Dims, groups: usize) -> Vec<Option<usize>> {
    let per = d.c / groups;
    let plane = d.plane();
    let mut map = Vec::with_capacity(d.numel());
    for n in 0..d.n {
        for oc in 0..d.c {
            let (i, g) = (oc / groups, oc % groups);
            let ic = i + g * per;
            let base = (n * d.c + ic) * plane;
            map.extend((0..plane).map(|p| Some(base + p)));
        }
    }
    map
}

pub(crate) fn gather<T: Element>(t: &TensorView<T>, map: &[Option<usize>]) -> Vec<T> {
    let src = t.to_vec();
    map.iter().map(|m| m.map_or(T::zero(), |i| src[i])).collect()
}

/// Zero-copy spatial shift: `view_offset(t, -s_d)`. Reads that cross a row
/// end land on the neighbouring row; reads past the whole buffer land on the
/// zeroed guard.
pub fn address_shift<T: Element>(t: &TensorView<T>, dir: ShiftDirection) -> Result<TensorView<T>> {
    if !t.is_row_major() {
        return Err(Error::NotDense { op: "address_shift" });
    }
    t.view_offset(-dir.offset(t.dims().w))
}

/// Two unit shifts composed into one view offset. Repeating a direction
/// (a displacement of two) is rejected; opposite directions cancel.
pub fn compose_shift<T: Element>(t: &TensorView<T>, a: ShiftDirection, b: ShiftDirection) -> Result<TensorView<T>> {
    if a == b {
        return Err(Error::InvalidComposition {
            a: a.name(),
            b: b.name(),
        });
    }
    if !t.is_row_major() {
        return Err(Error::NotDense { op: "compose_shift" });
    }
    let w = t.dims().w;
    t.view_offset(-(a.offset(w) + b.offset(w)))
}

/// 3x3 correlation kernel with a single 1 that moves content by `dir`;
/// `None` gives the centre tap.
pub fn one_hot_kernel<T: Element>(dir: Option<ShiftDirection>) -> [[T; 3]; 3] {
    let mut k = [[T::zero(); 3]; 3];
    let (dy, dx) = dir.map_or((0, 0), |d| d.displacement());
    k[(1 - dy) as usize][(1 - dx) as usize] = T::one();
    k
}

/// Depthwise 3x3 correlation with one kernel shared by all channels, zero
/// padding 1, stride 1.
pub fn depthwise3x3_reference<T: Element>(t: &TensorView<T>, kernel: &[[T; 3]; 3]) -> Result<TensorView<T>> {
    let d = t.dims();
    let src = t.to_vec();
    let (h, w) = (d.h as isize, d.w as isize);
    let mut out = vec![T::zero(); d.numel()];
    for nc in 0..d.n * d.c {
        let base = nc * d.plane();
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::zero();
                for (i, row) in kernel.iter().enumerate() {
                    for (j, &k) in row.iter().enumerate() {
                        let (sy, sx) = (y + i as isize - 1, x + j as isize - 1);
                        if k != T::zero() && (0..h).contains(&sy) && (0..w).contains(&sx) {
                            acc += k * src[base + (sy * w + sx) as usize];
                        }
                    }
                }
                out[base + (y * w + x) as usize] = acc;
            }
        }
    }
    let view = TensorView::alloc(d, 1)?;
    view.write_dense(&out)?;
    Ok(view)
}

/// ShiftNet-style shift: one-hot depthwise convolution with zero padding.
/// `out[n,c,h,w] = in[n,c,h-dy,w-dx]` inside the map, 0 outside.
pub fn feature_map_shift_reference<T: Element>(t: &TensorView<T>, dir: ShiftDirection) -> Result<TensorView<T>> {
    depthwise3x3_reference(t, &one_hot_kernel(Some(dir)))
}

pub(crate) fn feature_map_shift_source_map(d: Dims, dir: ShiftDirection) -> Vec<Option<usize>> {
    let (dy, dx) = dir.displacement();
    let (h, w) = (d.h as isize, d.w as isize);
    let mut map = Vec::with_capacity(d.numel());
    for nc in 0..d.n * d.c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y - dy, x - dx);
                map.push(if (0..h).contains(&sy) && (0..w).contains(&sx) {
                    Some(nc * d.plane() + (sy * w + sx) as usize)
                } else {
                    None
                });
            }
        }
    }
    map
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArenaSlot {
    pub channels: Range<usize>,
    pub writer: usize,
}

/// Pre-allocated concatenation target: each producer writes straight into
/// its channel range, so the concatenated tensor already exists.
#[derive(Clone, Debug)]
pub struct ConcatArena<T: Element> {
    whole: TensorView<T>,
    plan: Vec<ArenaSlot>,
}

/// Plans an arena of `channel_slots` consecutive channel ranges over a
/// shared `(N, ΣC, H, W)` buffer.
pub fn arena_plan<T: Element>(n: usize, h: usize, w: usize, channel_slots: &[usize]) -> Result<ConcatArena<T>> {
    if channel_slots.is_empty() || channel_slots.contains(&0) {
        return Err(Error::InvalidArgument("arena needs at least one non-empty slot".into()));
    }
    let mut plan = Vec::with_capacity(channel_slots.len());
    let mut start = 0;
    for (writer, &c) in channel_slots.iter().enumerate() {
        plan.push(ArenaSlot {
            channels: start..start + c,
            writer,
        });
        start += c;
    }
    let whole = TensorView::alloc(Dims::new(n, start, h, w)?, 1)?;
    Ok(ConcatArena { whole, plan })
}

impl<T: Element> ConcatArena<T> {
    pub fn plan(&self) -> &[ArenaSlot] {
        &self.plan
    }

    pub fn len(&self) -> usize {
        self.plan.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plan.is_empty()
    }

    /// Writable dense view over slot `slot`'s channel range.
    pub fn slot(&self, slot: usize) -> Result<TensorView<T>> {
        let s = self.plan.get(slot).ok_or(Error::SlotOutOfRange {
            slot,
            slots: self.plan.len(),
        })?;
        self.whole.slice_channels(s.channels.start, s.channels.end)
    }

    /// The concatenated tensor. Zero copy; reading it before every slot was
    /// written returns zeros for the unwritten ranges.
    pub fn concat(&self) -> TensorView<T> {
        self.whole.clone()
    }
}

pub fn arena_slot<T: Element>(arena: &ConcatArena<T>, slot: usize) -> Result<TensorView<T>> {
    arena.slot(slot)
}

pub fn arena_concat<T: Element>(arena: &ConcatArena<T>) -> TensorView<T> {
    arena.concat()
}

/// Channel concatenation by copying every part into a fresh tensor.
pub fn concat_reference<T: Element>(parts: &[TensorView<T>]) -> Result<TensorView<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?
        .dims();
    let mut total = 0;
    for p in parts {
        let d = p.dims();
        if (d.n, d.h, d.w) != (first.n, first.h, first.w) {
            return Err(Error::ShapeMismatch {
                op: "concat_reference",
                expected: first.to_vec(),
                got: d.to_vec(),
            });
        }
        total += d.c;
    }
    let dims = first.with_channels(total);
    let mut values = Vec::with_capacity(dims.numel());
    let contents: Vec<Vec<T>> = parts.iter().map(|p| p.to_vec()).collect();
    for n in 0..dims.n {
        for (p, v) in parts.iter().zip(&contents) {
            let image = p.dims().image();
            values.extend_from_slice(&v[n * image..(n + 1) * image]);
        }
    }
    let out = TensorView::alloc(dims, 1)?;
    out.write_dense(&values)?;
    Ok(out)
}

fn check_same(op: &'static str, a: Dims, b: Dims) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.to_vec(),
            got: b.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn check_output<T: Element>(
    op: &'static str,
    out: &TensorView<T>,
    dims: Dims,
    inputs: &[&TensorView<T>],
) -> Result<()> {
    check_same(op, dims, out.dims())?;
    if inputs.iter().any(|i| i.shares_buffer(out)) {
        return Err(Error::Aliased { op });
    }
    Ok(())
}

/// Additive residual `x + y` written into `out`.
pub fn residual_add_into<T: Element>(x: &TensorView<T>, y: &TensorView<T>, out: &TensorView<T>) -> Result<()> {
    check_same("residual_add", x.dims(), y.dims())?;
    check_output("residual_add", out, x.dims(), &[x, y])?;
    let sum: Vec<T> = x.to_vec().into_iter().zip(y.to_vec()).map(|(a, b)| a + b).collect();
    out.write_dense(&sum)
}

pub fn residual_add<T: Element>(x: &TensorView<T>, y: &TensorView<T>) -> Result<TensorView<T>> {
    let out = TensorView::alloc(x.dims(), 1)?;
    residual_add_into(x, y, &out)?;
    Ok(out)
}

pub fn scale<T: Element>(x: &TensorView<T>, k: T) -> Result<TensorView<T>> {
    let out = TensorView::alloc(x.dims(), 1)?;
    out.write_dense(&x.to_vec().into_iter().map(|v| v * k).collect::<Vec<_>>())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TensorView<f32> {
        TensorView::from_vec(Dims::new(1, 1, 3, 3).unwrap(), (1..=9).map(|x| x as f32).collect(), 1).unwrap()
    }

    fn rows(t: &TensorView<f32>) -> Vec<f32> {
        t.to_vec()
    }

    #[test]
    fn direction_offsets() {
        assert_eq!(ShiftDirection::Right.offset(5), 1);
        assert_eq!(ShiftDirection::Left.offset(5), -1);
        assert_eq!(ShiftDirection::Up.offset(5), -5);
        assert_eq!(ShiftDirection::Down.offset(5), 5);
    }

    #[test]
    fn address_shift_examples() {
        let t = grid();
        let r = address_shift(&t, ShiftDirection::Right).unwrap();
        assert_eq!(rows(&r), vec![0., 1., 2., 3., 4., 5., 6., 7., 8.]);
        let u = address_shift(&t, ShiftDirection::Up).unwrap();
        assert_eq!(rows(&u), vec![4., 5., 6., 7., 8., 9., 0., 0., 0.]);
        let d = address_shift(&t, ShiftDirection::Down).unwrap();
        assert_eq!(rows(&d), vec![0., 0., 0., 1., 2., 3., 4., 5., 6.]);
        assert_eq!(t.buffer().moves(), 0);
    }

    #[test]
    fn feature_map_shift_examples() {
        let t = grid();
        let r = feature_map_shift_reference(&t, ShiftDirection::Right).unwrap();
        assert_eq!(rows(&r), vec![0., 1., 2., 0., 4., 5., 0., 7., 8.]);
        assert_eq!(r.buffer().moves(), 9);
        let id = depthwise3x3_reference(&t, &one_hot_kernel(None)).unwrap();
        assert_eq!(rows(&id), rows(&t));
    }

    #[test]
    fn compose_examples() {
        // diagonal reads reach W + 1 past the ends: two guard rows
        let t = TensorView::from_vec(Dims::new(1, 1, 3, 3).unwrap(), (1..=9).map(|x| x as f32).collect(), 2).unwrap();
        assert!(compose_shift(&grid(), ShiftDirection::Up, ShiftDirection::Left).is_err());
        let ul = compose_shift(&t, ShiftDirection::Up, ShiftDirection::Left).unwrap();
        assert_eq!(rows(&ul), vec![5., 6., 7., 8., 9., 0., 0., 0., 0.]);
        let lu = compose_shift(&t, ShiftDirection::Left, ShiftDirection::Up).unwrap();
        assert_eq!(rows(&ul), rows(&lu));
        let lr = compose_shift(&t, ShiftDirection::Left, ShiftDirection::Right).unwrap();
        assert_eq!(lr.offset(), t.offset());
        assert!(compose_shift(&t, ShiftDirection::Up, ShiftDirection::Up).is_err());
    }

    #[test]
    fn channel_shift_small() {
        let d = Dims::new(1, 8, 1, 1).unwrap();
        let t = TensorView::<f32>::alloc_with_reserve(d, 1, 1).unwrap();
        t.write_dense(&(0..8).map(|x| x as f32).collect::<Vec<_>>()).unwrap();
        let before = t.buffer().moves();
        let s = channel_shift(&t, ChannelShiftSpec::new(8, 4).unwrap()).unwrap();
        assert_eq!(s.to_vec(), vec![1., 2., 3., 4., 5., 6., 7., 0.]);
        assert_eq!(t.buffer().moves() - before, 1);
    }

    #[test]
    fn channel_shift_zero_is_identity() {
        let d = Dims::new(1, 4, 1, 1).unwrap();
        let t = TensorView::<f32>::from_fn(d, |i| i as f32).unwrap();
        let spec = ChannelShiftSpec::new(4, 4).unwrap();
        assert_eq!(spec.shift_channels, 0);
        let s = channel_shift(&t, spec).unwrap();
        assert_eq!(s.to_vec(), t.to_vec());
        assert_eq!(t.buffer().moves(), 0);
    }

    #[test]
    fn channel_shift_needs_reserve() {
        let d = Dims::new(2, 8, 2, 2).unwrap();
        let t = TensorView::<f32>::alloc(d, 1).unwrap();
        let err = channel_shift(&t, ChannelShiftSpec::new(8, 4).unwrap()).unwrap_err();
        assert!(matches!(err, Error::InsufficientReserve { image: 0, .. }));
        assert!(channel_shift(&t, ChannelShiftSpec::with_shift(3, 1)).is_err());
    }

    #[test]
    fn shuffle_examples() {
        let d = Dims::new(1, 4, 1, 1).unwrap();
        let t = TensorView::<f32>::from_fn(d, |i| i as f32).unwrap();
        let s = channel_shuffle_reference(&t, 2).unwrap();
        assert_eq!(s.to_vec(), vec![0., 2., 1., 3.]);
        let id = channel_shuffle_reference(&t, 1).unwrap();
        assert_eq!(id.to_vec(), t.to_vec());
        assert_eq!(id.buffer().moves(), 4);
        assert!(channel_shuffle_reference(&t, 3).is_err());
    }

    #[test]
    fn shift_vs_shuffle_fig2_ratio() {
        let d = Dims::new(1, 16, 1, 1).unwrap();
        let t = TensorView::<f32>::alloc_with_reserve(d, 1, 2).unwrap();
        let shuffled = channel_shuffle_reference(&t, 4).unwrap();
        channel_shift(&t, ChannelShiftSpec::new(16, 4).unwrap()).unwrap();
        assert_eq!(shuffled.buffer().moves(), 16);
        assert_eq!(t.buffer().moves(), 2);
    }

    #[test]
    fn arena_examples() {
        let arena = arena_plan::<f32>(1, 1, 1, &[2, 3]).unwrap();
        arena.slot(0).unwrap().write_dense(&[1.0; 2]).unwrap();
        arena.slot(1).unwrap().write_dense(&[2.0; 3]).unwrap();
        let before = arena.concat().buffer().moves();
        let c = arena_concat(&arena);
        assert_eq!(c.to_vec(), vec![1., 1., 2., 2., 2.]);
        assert_eq!(c.buffer().moves(), before);
        assert!(arena.slot(2).is_err());

        let single = arena_plan::<f32>(1, 2, 2, &[3]).unwrap();
        assert_eq!(single.slot(0).unwrap().to_vec(), single.concat().to_vec());
        assert_eq!(single.slot(0).unwrap().dims(), single.concat().dims());
    }

    #[test]
    fn explicit_concat_copies_everything() {
        let a = TensorView::<f32>::from_fn(Dims::new(2, 1, 2, 2).unwrap(), |i| i as f32).unwrap();
        let b = TensorView::<f32>::from_fn(Dims::new(2, 2, 2, 2).unwrap(), |i| 100.0 + i as f32).unwrap();
        let c = concat_reference(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.buffer().moves(), 24);
        assert_eq!(c.get(1, 0, 0, 0), a.get(1, 0, 0, 0));
        assert_eq!(c.get(1, 2, 1, 1), b.get(1, 1, 1, 1));
    }

    #[test]
    fn residual_examples() {
        let d = Dims::new(1, 2, 1, 1).unwrap();
        let x = TensorView::<f32>::from_vec(d, vec![1.0, 2.0], 1).unwrap();
        let y = TensorView::<f32>::from_vec(d, vec![3.0, 4.0], 1).unwrap();
        assert_eq!(residual_add(&x, &y).unwrap().to_vec(), vec![4.0, 6.0]);
        let z = TensorView::<f32>::zeros(d).unwrap();
        assert_eq!(residual_add(&x, &z).unwrap().to_vec(), x.to_vec());
        assert_eq!(residual_add(&x, &x).unwrap().to_vec(), scale(&x, 2.0).unwrap().to_vec());
        let bad = TensorView::<f32>::zeros(Dims::new(1, 3, 1, 1).unwrap()).unwrap();
        assert!(residual_add(&x, &bad).is_err());
    }
}
