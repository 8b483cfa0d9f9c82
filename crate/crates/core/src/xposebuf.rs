//! Banked weight buffer with conflict-free normal and transposed reads.
//!
//! Forward convolution wants, per cycle, the same kernel tap of `pof`
//! consecutive filters (one per MAC lane). The backward data pass wants the
//! same tap of `pof` consecutive *input channels* of one filter — the
//! transposed access — and it wants the kernel rotated 180 degrees.
//!
//! Both patterns hit `pof` single-ported banks without conflicts thanks to a
//! circulant placement. Kernels are blocked per (filter, input channel):
//! block words are the `nkx * nky` taps in x-fastest order. Filters are
//! grouped `pof` at a time (lane = filter mod pof); input-channel rows are
//! padded up to a multiple of `pof`. The block for (group g, row r, lane c)
//! lives in bank `(c + r) % pof` at word address `(g * rows + r) * block + j`:
//!
//! * normal read (group g, row r, tap j): lanes map to banks by a rotation,
//!   and every bank reads the *same* address — one shared address generator;
//! * transposed read (filter f, row-group q, tap j): rows `q*pof + i` land in
//!   `pof` distinct banks, each at its own address, and the tap index is
//!   reversed (`block - 1 - j`), which is exactly the 180-degree rotation;
//! * lanes past `nof` and rows past `nif` hold zero blocks, so padded reads
//!   are valid and contribute nothing.

use crate::golden::tensor::FxpTensor;
use crate::fxp::QFormat;

/// One bank access: which bank, and the word address within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub bank: usize,
    pub addr: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XposeBuf {
    pof: usize,
    nkx: usize,
    nky: usize,
    nif: usize,
    nof: usize,
    /// Input-channel rows padded to a multiple of `pof`.
    rows: usize,
    /// Filter groups of `pof` lanes each.
    groups: usize,
    /// `pof` banks, each `groups * rows * block_words` words.
    banks: Vec<Vec<i16>>,
}

impl XposeBuf {
    pub fn new(pof: usize, nkx: usize, nky: usize, nif: usize, nof: usize) -> XposeBuf {
        assert!(pof > 0 && nkx > 0 && nky > 0 && nif > 0 && nof > 0);
        let rows = nif.div_ceil(pof) * pof;
        let groups = nof.div_ceil(pof);
        let per_bank = groups * rows * nkx * nky;
        XposeBuf { pof, nkx, nky, nif, nof, rows, groups, banks: vec![vec![0; per_bank]; pof] }
    }

    /// Load a kernel tensor ([kx, ky, channel, filter]) into the buffer.
    pub fn from_tensor(w: &FxpTensor, pof: usize) -> XposeBuf {
        let [nkx, nky, nif, nof] = w.dims();
        let mut buf = Self::new(pof, nkx, nky, nif, nof);
        let block = buf.block_words();
        for f in 0..nof {
            for r in 0..nif {
                let src = w.idx(0, 0, r, f);
                let words = &w.raw()[src..src + block];
                let (bank, base) = buf.block_home(f, r);
                buf.banks[bank][base..base + block].copy_from_slice(words);
            }
        }
        buf
    }

    /// Extract the logical kernel tensor (padding dropped).
    pub fn to_tensor(&self, fmt: QFormat) -> FxpTensor {
        let mut w = FxpTensor::zeros([self.nkx, self.nky, self.nif, self.nof], fmt);
        let block = self.block_words();
        for f in 0..self.nof {
            for r in 0..self.nif {
                let (bank, base) = self.block_home(f, r);
                let dst = w.idx(0, 0, r, f);
                w.raw_mut()[dst..dst + block].copy_from_slice(&self.banks[bank][base..base + block]);
            }
        }
        w
    }

    pub fn pof(&self) -> usize {
        self.pof
    }

    /// Words in one kernel block (`nkx * nky`).
    pub fn block_words(&self) -> usize {
        self.nkx * self.nky
    }

    /// Logical (unpadded) kernel words held: nof * nif * nkx * nky.
    pub fn stored_words(&self) -> usize {
        self.nof * self.nif * self.block_words()
    }

    /// Total words including zero padding — the buffer's physical footprint
    /// and the length of [`Self::dram_image`].
    pub fn image_words(&self) -> usize {
        self.pof * self.banks[0].len()
    }

    /// Physical footprint for a kernel of the given shape at unroll `pof`,
    /// in words, without building the buffer.
    pub fn image_words_for(pof: usize, nkx: usize, nky: usize, nif: usize, nof: usize) -> usize {
        let rows = nif.div_ceil(pof) * pof;
        let groups = nof.div_ceil(pof);
        pof * groups * rows * nkx * nky
    }

    /// Bank and base word address of the block for (filter, input channel).
    fn block_home(&self, f: usize, r: usize) -> (usize, usize) {
        debug_assert!(f < self.groups * self.pof && r < self.rows);
        let (g, lane) = (f / self.pof, f % self.pof);
        ((lane + r) % self.pof, (g * self.rows + r) * self.block_words())
    }

    /// Bank accesses of a normal read: tap `j` of all `pof` filters in group
    /// `g` at input channel `r`. Entry `c` serves lane/filter `g * pof + c`.
    /// Every access carries the same address; banks differ by a rotation.
    pub fn fp_access(&self, g: usize, r: usize, j: usize) -> Vec<Access> {
        assert!(g < self.groups && r < self.rows && j < self.block_words());
        let addr = (g * self.rows + r) * self.block_words() + j;
        (0..self.pof).map(|c| Access { bank: (c + r) % self.pof, addr }).collect()
    }

    /// Normal read: tap `j` for the `pof` filters of group `g`, channel `r`,
    /// in lane order. Lanes past `nof` read zero (padding).
    pub fn read_fp(&self, g: usize, r: usize, j: usize) -> Vec<i16> {
        self.fp_access(g, r, j).iter().map(|a| self.banks[a.bank][a.addr]).collect()
    }

    /// Bank accesses of a transposed read: flipped tap `j` of filter `f` for
    /// the `pof` input channels of row-group `q`. Entry `i` serves channel
    /// `q * pof + i`. Addresses differ per bank; banks are again a rotation.
    pub fn bp_access(&self, f: usize, q: usize, j: usize) -> Vec<Access> {
        assert!(f < self.nof && q < self.rows / self.pof && j < self.block_words());
        let block = self.block_words();
        let (g, lane) = (f / self.pof, f % self.pof);
        (0..self.pof)
            .map(|i| {
                let r = q * self.pof + i;
                Access {
                    bank: (lane + r) % self.pof,
                    addr: (g * self.rows + r) * block + (block - 1 - j),
                }
            })
            .collect()
    }

    /// Transposed read: tap `j` (in *flipped* kernel order) of filter `f` for
    /// `pof` consecutive input channels, in channel order. Rows past `nif`
    /// read zero (padding).
    pub fn read_bp(&self, f: usize, q: usize, j: usize) -> Vec<i16> {
        self.bp_access(f, q, j).iter().map(|a| self.banks[a.bank][a.addr]).collect()
    }

    /// Overwrite one tap of one kernel block (weight-update write path).
    pub fn write_word(&mut self, f: usize, r: usize, j: usize, v: i16) {
        assert!(f < self.nof && r < self.nif && j < self.block_words());
        let (bank, base) = self.block_home(f, r);
        self.banks[bank][base + j] = v;
    }

    /// The buffer content as one flat word image, banks concatenated in bank
    /// order. This is the DRAM-resident form used by checkpoints.
    pub fn dram_image(&self) -> Vec<i16> {
        let mut out = Vec::with_capacity(self.image_words());
        for b in &self.banks {
            out.extend_from_slice(b);
        }
        out
    }

    /// Rebuild a buffer from [`Self::dram_image`] output.
    pub fn from_dram_image(
        pof: usize,
        nkx: usize,
        nky: usize,
        nif: usize,
        nof: usize,
        words: &[i16],
    ) -> XposeBuf {
        let mut buf = Self::new(pof, nkx, nky, nif, nof);
        let per_bank = buf.banks[0].len();
        assert_eq!(words.len(), pof * per_bank, "image length mismatch");
        for (b, bank) in buf.banks.iter_mut().enumerate() {
            bank.copy_from_slice(&words[b * per_bank..(b + 1) * per_bank]);
        }
        buf
    }
}
