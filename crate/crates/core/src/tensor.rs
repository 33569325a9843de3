//! Guarded contiguous buffers and strided NCHW views.
//!
//! Every buffer carries a zero-filled guard margin at both ends so that a
//! view whose offset was moved by a shift primitive can still address its
//! extreme elements. A view is only an `(offset, dims, strides)` triple over
//! a shared buffer; creating, slicing or offsetting views never copies data.
//! Each buffer counts the elements physically written into it (`moves`).

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};
use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// Floating point element stored in a [`Buffer`].
pub trait Element:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
}

/// Batch, channel, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidDims { n, c, h, w });
        }
        Ok(Self { n, c, h, w })
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn image(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn to_vec(&self) -> Vec<usize> {
        vec![self.n, self.c, self.h, self.w]
    }

    pub fn with_channels(&self, c: usize) -> Self {
        Self { c, ..*self }
    }

    pub fn dense_strides(&self) -> [isize; 4] {
        [self.image() as isize, self.plane() as isize, self.w as isize, 1]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(u64);

static NEXT_BUFFER_ID: AtomicU64 = AtomicU64::new(1);

/// Contiguous storage with `guard` zeroed elements before index 0 and after
/// index `len - 1`.
pub struct Buffer<T> {
    id: BufferId,
    len: usize,
    guard: usize,
    data: RwLock<Vec<T>>,
    moves: AtomicU64,
}

impl<T: Element> Buffer<T> {
    fn with_storage(len: usize, guard: usize, data: Vec<T>) -> Arc<Self> {
        debug_assert_eq!(data.len(), len + 2 * guard);
        Arc::new(Self {
            id: BufferId(NEXT_BUFFER_ID.fetch_add(1, Ordering::Relaxed)),
            len,
            guard,
            data: RwLock::new(data),
            moves: AtomicU64::new(0),
        })
    }

    pub fn zeroed(len: usize, guard: usize) -> Arc<Self> {
        Self::with_storage(len, guard, vec![T::zero(); len + 2 * guard])
    }

    /// Takes ownership of `values` as the logical contents. No moves are
    /// counted: the data is adopted, not copied into an existing buffer.
    pub fn from_values(values: Vec<T>, guard: usize) -> Arc<Self> {
        let len = values.len();
        let mut data = Vec::with_capacity(len + 2 * guard);
        data.resize(guard, T::zero());
        data.extend(values);
        data.resize(len + 2 * guard, T::zero());
        Self::with_storage(len, guard, data)
    }

    pub fn id(&self) -> BufferId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn guard(&self) -> usize {
        self.guard
    }

    /// Storage length including both guard margins.
    pub fn storage_len(&self) -> usize {
        self.len + 2 * self.guard
    }

    pub fn moves(&self) -> u64 {
        self.moves.load(Ordering::SeqCst)
    }

    pub(crate) fn add_moves(&self, k: usize) {
        self.moves.fetch_add(k as u64, Ordering::SeqCst);
    }

    pub fn read(&self) -> BufferRead<'_, T> {
        BufferRead {
            guard: self.guard as isize,
            data: self.data.read_recursive(),
        }
    }

    pub(crate) fn write(&self) -> BufferWrite<'_, T> {
        BufferWrite {
            guard: self.guard as isize,
            data: self.data.write(),
        }
    }

    /// Overwrites both guard margins. Test hook only; no library operation
    /// writes the guard.
    pub fn fill_guard(&self, value: T) {
        let mut data = self.data.write();
        let (g, len) = (self.guard, self.len);
        data[..g].iter_mut().for_each(|x| *x = value);
        data[g + len..].iter_mut().for_each(|x| *x = value);
    }

    pub fn guard_is_zero(&self) -> bool {
        let data = self.data.read_recursive();
        let (g, len) = (self.guard, self.len);
        data[..g].iter().chain(&data[g + len..]).all(|x| x.is_zero())
    }

    /// Copy of the whole storage, guards included.
    pub fn snapshot(&self) -> Vec<T> {
        self.data.read_recursive().clone()
    }
}

impl<T> fmt::Debug for Buffer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Buffer")
            .field("id", &self.id)
            .field("len", &self.len)
            .field("guard", &self.guard)
            .field("moves", &self.moves.load(Ordering::Relaxed))
            .finish()
    }
}

/// Read access addressed by logical index (negative indices reach the
/// leading guard).
pub struct BufferRead<'a, T> {
    guard: isize,
    data: RwLockReadGuard<'a, Vec<T>>,
}

impl<T: Copy> BufferRead<'_, T> {
    #[inline]
    pub fn at(&self, index: isize) -> T {
        self.data[(index + self.guard) as usize]
    }

    #[inline]
    pub fn run(&self, start: isize, len: usize) -> &[T] {
        let s = (start + self.guard) as usize;
        &self.data[s..s + len]
    }
}

pub(crate) struct BufferWrite<'a, T> {
    guard: isize,
    data: RwLockWriteGuard<'a, Vec<T>>,
}

impl<T: Copy> BufferWrite<'_, T> {
    #[inline]
    pub fn at(&self, index: isize) -> T {
        self.data[(index + self.guard) as usize]
    }

    #[inline]
    pub fn set(&mut self, index: isize, value: T) {
        self.data[(index + self.guard) as usize] = value;
    }

    #[inline]
    pub fn run_mut(&mut self, start: isize, len: usize) -> &mut [T] {
        let s = (start + self.guard) as usize;
        &mut self.data[s..s + len]
    }

    pub fn copy_within(&mut self, src: isize, len: usize, dst: isize) {
        let s = (src + self.guard) as usize;
        let d = (dst + self.guard) as usize;
        self.data.copy_within(s..s + len, d);
    }
}

/// An NCHW window over a [`Buffer`].
#[derive(Clone)]
pub struct TensorView<T: Element> {
    buffer: Arc<Buffer<T>>,
    offset: isize,
    dims: Dims,
    strides: [isize; 4],
}

impl<T: Element> fmt::Debug for TensorView<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TensorView")
            .field("buffer", &self.buffer.id)
            .field("offset", &self.offset)
            .field("dims", &self.dims)
            .field("strides", &self.strides)
            .finish()
    }
}

impl<T: Element> TensorView<T> {
    fn checked(buffer: Arc<Buffer<T>>, offset: isize, dims: Dims, strides: [isize; 4]) -> Result<Self> {
        let view = Self {
            buffer,
            offset,
            dims,
            strides,
        };
        let (min, max) = view.extent();
        let lo = -(view.buffer.guard as isize);
        let hi = (view.buffer.len + view.buffer.guard) as isize;
        if min < lo || max >= hi {
            return Err(Error::GuardOverflow { min, max, lo, hi });
        }
        Ok(view)
    }

    /// Dense view over a fresh zeroed buffer with `guard_rows * W` guard
    /// elements at each end.
    pub fn alloc(dims: Dims, guard_rows: usize) -> Result<Self> {
        Self::alloc_with_reserve(dims, guard_rows, 0)
    }

    /// Like [`alloc`](Self::alloc) but every image slab is followed by
    /// `reserve_channels` spare channel planes, so the view's batch stride is
    /// `(C + reserve) * H * W`. Channel shift appends into this space.
    pub fn alloc_with_reserve(dims: Dims, guard_rows: usize, reserve_channels: usize) -> Result<Self> {
        let dims = Dims::new(dims.n, dims.c, dims.h, dims.w)?;
        if guard_rows == 0 {
            return Err(Error::InvalidArgument("guard_rows must be >= 1".into()));
        }
        let slab = (dims.c + reserve_channels) * dims.plane();
        let buffer = Buffer::zeroed(dims.n * slab, guard_rows * dims.w);
        let mut strides = dims.dense_strides();
        strides[0] = slab as isize;
        Self::checked(buffer, 0, dims, strides)
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::alloc(dims, 1)
    }

    /// Dense view adopting `values` (NCHW order) as its contents.
    pub fn from_vec(dims: Dims, values: Vec<T>, guard_rows: usize) -> Result<Self> {
        let dims = Dims::new(dims.n, dims.c, dims.h, dims.w)?;
        if values.len() != dims.numel() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                expected: vec![dims.numel()],
                got: vec![values.len()],
            });
        }
        if guard_rows == 0 {
            return Err(Error::InvalidArgument("guard_rows must be >= 1".into()));
        }
        let buffer = Buffer::from_values(values, guard_rows * dims.w);
        Self::checked(buffer, 0, dims, dims.dense_strides())
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        Self::from_vec(dims, (0..dims.numel()).map(&mut f).collect(), 1)
    }

    pub fn buffer(&self) -> &Arc<Buffer<T>> {
        &self.buffer
    }

    pub fn offset(&self) -> isize {
        self.offset
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn strides(&self) -> [isize; 4] {
        self.strides
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn numel(&self) -> usize {
        self.dims.numel()
    }

    pub fn shares_buffer(&self, other: &TensorView<T>) -> bool {
        Arc::ptr_eq(&self.buffer, &other.buffer)
    }

    /// Strides are exactly `(C*H*W, H*W, W, 1)`.
    pub fn is_dense(&self) -> bool {
        self.strides == self.dims.dense_strides()
    }

    /// Each image is a run of contiguous channel planes; the batch stride may
    /// exceed `C*H*W` (reserve space or a channel slice of a wider tensor).
    pub fn is_row_major(&self) -> bool {
        let d = self.dims.dense_strides();
        self.strides[1..] == d[1..] && (self.dims.n == 1 || self.strides[0] >= d[0])
    }

    /// Smallest and largest buffer index this view can address.
    pub fn extent(&self) -> (isize, isize) {
        let d = self.dims.to_vec();
        let span: isize = d
            .iter()
            .zip(self.strides.iter())
            .map(|(&n, &s)| (n as isize - 1) * s)
            .sum();
        (self.offset, self.offset + span)
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> isize {
        self.offset
            + n as isize * self.strides[0]
            + c as isize * self.strides[1]
            + h as isize * self.strides[2]
            + w as isize * self.strides[3]
    }

    /// Buffer index of the first element of plane `(n, c)`.
    #[inline]
    pub fn plane_start(&self, n: usize, c: usize) -> isize {
        self.offset + n as isize * self.strides[0] + c as isize * self.strides[1]
    }

    /// Buffer index of every logical element, in NCHW order.
    pub fn indices(&self) -> Vec<isize> {
        let Dims { n, c, h, w } = self.dims;
        let mut out = Vec::with_capacity(self.numel());
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    let row = self.index(ni, ci, hi, 0);
                    out.extend((0..w).map(|wi| row + wi as isize * self.strides[3]));
                }
            }
        }
        out
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.buffer.read().at(self.index(n, c, h, w))
    }

    /// Logical contents in NCHW order.
    pub fn to_vec(&self) -> Vec<T> {
        let data = self.buffer.read();
        if self.is_row_major() {
            let image = self.dims.image();
            let mut out = Vec::with_capacity(self.numel());
            for n in 0..self.dims.n {
                out.extend_from_slice(data.run(self.plane_start(n, 0), image));
            }
            return out;
        }
        self.indices().into_iter().map(|i| data.at(i)).collect()
    }

    /// Shifts the view's origin by `delta` elements. Zero copy.
    pub fn view_offset(&self, delta: isize) -> Result<Self> {
        Self::checked(self.buffer.clone(), self.offset + delta, self.dims, self.strides)
    }

    /// Channels `[c0, c1)`. Zero copy.
    pub fn slice_channels(&self, c0: usize, c1: usize) -> Result<Self> {
        if c0 >= c1 || c1 > self.dims.c {
            return Err(Error::ChannelRange {
                c0,
                c1,
                channels: self.dims.c,
            });
        }
        Self::checked(
            self.buffer.clone(),
            self.offset + c0 as isize * self.strides[1],
            self.dims.with_channels(c1 - c0),
            self.strides,
        )
    }

    /// Dense copy into a fresh buffer; counts `numel` moves on the new buffer.
    pub fn materialize(&self) -> Result<Self> {
        let out = Self::alloc(self.dims, 1)?;
        out.write_dense(&self.to_vec())?;
        Ok(out)
    }

    /// Writes `values` (NCHW order) through this view and counts one move per
    /// element. Fails if any target lies in a guard margin.
    pub fn write_dense(&self, values: &[T]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "write_dense",
                expected: vec![self.numel()],
                got: vec![values.len()],
            });
        }
        let (min, max) = self.extent();
        if min < 0 || max >= self.buffer.len as isize {
            let index = if min < 0 { min } else { max };
            return Err(Error::GuardWrite {
                index,
                len: self.buffer.len,
            });
        }
        let mut data = self.buffer.write();
        if self.is_row_major() {
            let image = self.dims.image();
            for (n, chunk) in values.chunks(image).enumerate() {
                data.run_mut(self.plane_start(n, 0), image).copy_from_slice(chunk);
            }
        } else {
            for (i, v) in self.indices().into_iter().zip(values) {
                data.set(i, *v);
            }
        }
        drop(data);
        self.buffer.add_moves(values.len());
        Ok(())
    }

    /// In-place arithmetic update of every logical element (parameter
    /// updates, statistics). Not a copy, so `moves` is unchanged.
    pub fn update(&self, mut f: impl FnMut(usize, T) -> T) {
        let mut data = self.buffer.write();
        for (k, i) in self.indices().into_iter().enumerate() {
            let v = data.at(i);
            data.set(i, f(k, v));
        }
    }
}
