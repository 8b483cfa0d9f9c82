//! Dense tensor containers for 16-bit fixed-point data and the 1-bit /
//! 2-bit sidecar tensors produced by ReLU and max-pooling.
//!
//! Layout is always x fastest, then y, then channel, then filter. A 3-D
//! activation map is a 4-D tensor with the filter extent fixed at 1; weights
//! use [kx, ky, input-channel, filter]. Flattening (x,y,c) to (1,1,x*y*c) is
//! therefore a pure reshape: the storage order already matches.

use crate::fxp::{Fxp, QFormat};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FxpTensor {
    dims: [usize; 4],
    data: Vec<i16>,
    fmt: QFormat,
}

impl FxpTensor {
    pub fn zeros(dims: [usize; 4], fmt: QFormat) -> FxpTensor {
        FxpTensor { dims, data: vec![0; dims.iter().product()], fmt }
    }

    /// 3-D convenience constructor (x, y, channel).
    pub fn zeros3(x: usize, y: usize, c: usize, fmt: QFormat) -> FxpTensor {
        Self::zeros([x, y, c, 1], fmt)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn fmt(&self) -> QFormat {
        self.fmt
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Raw words in storage order.
    pub fn raw(&self) -> &[i16] {
        &self.data
    }

    pub fn raw_mut(&mut self) -> &mut [i16] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize, f: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && c < self.dims[2] && f < self.dims[3]);
        x + self.dims[0] * (y + self.dims[1] * (c + self.dims[2] * f))
    }

    pub fn get(&self, x: usize, y: usize, c: usize, f: usize) -> Fxp {
        Fxp::from_raw(self.data[self.idx(x, y, c, f)], self.fmt)
    }

    pub fn to_real_vec(&self) -> Vec<f64> {
        let s = self.fmt.scale();
        self.data.iter().map(|&r| r as f64 / s).collect()
    }

    /// Reshape in place; element count and storage order preserved.
    pub fn reshape(&mut self, dims: [usize; 4]) {
        assert_eq!(
            dims.iter().product::<usize>(),
            self.data.len(),
            "reshape must preserve element count"
        );
        self.dims = dims;
    }

    /// DRAM footprint in bytes (two bytes per element).
    pub fn bytes(&self) -> u64 {
        self.data.len() as u64 * 2
    }
}

/// One bit per element, addressed by the owning tensor's linear index. Kept
/// linear on purpose: reshapes (flatten) leave it untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    len: usize,
    words: Vec<u64>,
}

impl BitTensor {
    pub fn new(len: usize) -> BitTensor {
        BitTensor { len, words: vec![0; len.div_ceil(64)] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        debug_assert!(i < self.len);
        if v {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// DRAM footprint in bytes (one bit per element, byte-padded).
    pub fn bytes(&self) -> u64 {
        (self.len as u64).div_ceil(8)
    }
}

/// Winner offsets from max-pooling, one code per pooled pixel. A code is the
/// row-major offset of the selected element inside its k*k window, so it
/// needs ceil(log2(k^2)) bits; storage here is one byte per code, accounting
/// elsewhere uses the packed width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIdx {
    dims: [usize; 3],
    k: usize,
    data: Vec<u8>,
}

impl PoolIdx {
    pub fn new(dims: [usize; 3], k: usize) -> PoolIdx {
        PoolIdx { dims, k, data: vec![0; dims.iter().product()] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Codes in storage order (same x-fastest order as the pooled tensor).
    pub fn codes(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && c < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * c)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        debug_assert!((v as usize) < self.k * self.k);
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    /// Bits per packed code.
    pub fn code_bits(k: usize) -> u32 {
        usize::BITS - (k * k - 1).leading_zeros()
    }

    /// DRAM footprint in bytes at packed code width.
    pub fn bytes(&self) -> u64 {
        (self.data.len() as u64 * Self::code_bits(self.k) as u64).div_ceil(8)
    }
}
