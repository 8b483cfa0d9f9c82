//! Reference kernels: convolution forward/backward, ReLU, max-pooling,
//! loss gradients, and the momentum weight update.
//!
//! Numeric contract shared by every kernel:
//! * products of two 16-bit operands are exact in 32 bits;
//! * a reduction accumulates those products at full precision — no
//!   intermediate rounding — and the true sum must fit the 32-bit
//!   accumulator (hard error otherwise);
//! * each output element is requantized exactly once, from the accumulator
//!   format to the destination format, through the active `Rounder`.
//!
//! Because integer addition is associative, any execution order over the
//! same reduction produces the same accumulator value; that is what lets a
//! tiled engine match these kernels bit for bit as long as it also defers
//! rounding to the end of the reduction.
//!
//! Hot loops run on `i32` row accumulators with wrapping arithmetic when a
//! cheap per-filter bound (`max |operand| * sum |taps|`) proves the true sum
//! fits; otherwise they fall back to `i64` accumulation with an explicit
//! 32-bit range check per output. Both paths produce identical bits.

use crate::fxp::{Fxp, QFormat, Rounder};
use crate::golden::tensor::{BitTensor, FxpTensor, PoolIdx};
use crate::model::LossKind;

/// Output extent of a strided, padded correlation along one axis.
pub fn conv_out_extent(n_in: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n_in + 2 * pad - k) / stride + 1
}

fn sum_abs_filter_taps(w: &FxpTensor) -> Vec<i64> {
    let [nkx, nky, nif, nof] = w.dims();
    let taps = nkx * nky * nif;
    (0..nof)
        .map(|f| {
            let base = w.idx(0, 0, 0, f);
            w.raw()[base..base + taps]
                .iter()
                .map(|&v| v.unsigned_abs() as i64)
                .sum()
        })
        .collect()
}

fn max_abs(t: &FxpTensor) -> i64 {
    t.raw().iter().map(|&v| v.unsigned_abs() as i64).max().unwrap_or(0)
}

/// Convolution forward pass: correlation of `a` with `w`, one requantize per
/// output element. `a` is (nix, niy, nif, 1); `w` is (nkx, nky, nif, nof);
/// the result is (nox, noy, nof, 1) in `out_fmt`.
///
/// A fully-connected layer is the degenerate case nkx = nix, nky = niy,
/// pad = 0, which leaves a single output pixel per filter.
pub fn conv_forward(
    a: &FxpTensor,
    w: &FxpTensor,
    stride: usize,
    pad: usize,
    out_fmt: QFormat,
    rounder: &mut Rounder,
) -> FxpTensor {
    let [nix, niy, nif, _] = a.dims();
    let [nkx, nky, wif, nof] = w.dims();
    assert_eq!(nif, wif, "kernel input channels must match activation channels");
    let nox = conv_out_extent(nix, nkx, stride, pad);
    let noy = conv_out_extent(niy, nky, stride, pad);
    let acc_frac = a.fmt().frac_bits() + w.fmt().frac_bits();

    let mut out = FxpTensor::zeros3(nox, noy, nof, out_fmt);
    let filter_bound = sum_abs_filter_taps(w);
    let a_max = max_abs(a);

    let mut row32 = vec![0i32; nox];
    let mut row64 = vec![0i64; nox];
    for f in 0..nof {
        let fast = a_max * filter_bound[f] <= i32::MAX as i64;
        for y in 0..noy {
            if fast {
                row32[..nox].fill(0);
                accum_fwd_row_i32(a, w, stride, pad, f, y, &mut row32);
                let base = out.idx(0, y, f, 0);
                for x in 0..nox {
                    out.raw_mut()[base + x] =
                        rounder.requantize_raw(row32[x] as i64, acc_frac, out_fmt);
                }
            } else {
                row64[..nox].fill(0);
                accum_fwd_row_i64(a, w, stride, pad, f, y, &mut row64);
                let base = out.idx(0, y, f, 0);
                for x in 0..nox {
                    let sum = row64[x];
                    assert!(
                        i32::try_from(sum).is_ok(),
                        "32-bit accumulator overflow in conv forward (sum {sum} at x={x} y={y} f={f})"
                    );
                    out.raw_mut()[base + x] = rounder.requantize_raw(sum, acc_frac, out_fmt);
                }
            }
        }
    }
    out
}

fn accum_fwd_row_i32(
    a: &FxpTensor,
    w: &FxpTensor,
    stride: usize,
    pad: usize,
    f: usize,
    y: usize,
    row: &mut [i32],
) {
    let [nix, niy, nif, _] = a.dims();
    let [nkx, nky, _, _] = w.dims();
    let nox = row.len();
    for c in 0..nif {
        for ky in 0..nky {
            let iy = (y * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= niy as isize {
                continue;
            }
            let a_base = a.idx(0, iy as usize, c, 0);
            let a_row = &a.raw()[a_base..a_base + nix];
            let w_base = w.idx(0, ky, c, f);
            for kx in 0..nkx {
                let wv = w.raw()[w_base + kx] as i32;
                if wv == 0 {
                    continue;
                }
                if stride == 1 {
                    // ix = x + kx - pad stays in range for a contiguous x span.
                    let off = kx as isize - pad as isize;
                    let x_lo = (-off).max(0) as usize;
                    let x_hi = nox.min((nix as isize - off).max(0) as usize);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src = &a_row[(x_lo as isize + off) as usize..(x_hi as isize + off) as usize];
                    for (acc, &px) in row[x_lo..x_hi].iter_mut().zip(src) {
                        *acc = acc.wrapping_add(wv.wrapping_mul(px as i32));
                    }
                } else {
                    for (x, acc) in row.iter_mut().enumerate() {
                        let ix = (x * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < nix as isize {
                            *acc = acc.wrapping_add(wv.wrapping_mul(a_row[ix as usize] as i32));
                        }
                    }
                }
            }
        }
    }
}

fn accum_fwd_row_i64(
    a: &FxpTensor,
    w: &FxpTensor,
    stride: usize,
    pad: usize,
    f: usize,
    y: usize,
    row: &mut [i64],
) {
    let [nix, niy, nif, _] = a.dims();
    let [nkx, nky, _, _] = w.dims();
    for c in 0..nif {
        for ky in 0..nky {
            let iy = (y * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= niy as isize {
                continue;
            }
            let a_base = a.idx(0, iy as usize, c, 0);
            let a_row = &a.raw()[a_base..a_base + nix];
            let w_base = w.idx(0, ky, c, f);
            for kx in 0..nkx {
                let wv = w.raw()[w_base + kx] as i32;
                if wv == 0 {
                    continue;
                }
                for (x, acc) in row.iter_mut().enumerate() {
                    let ix = (x * stride + kx) as isize - pad as isize;
                    if ix >= 0 && ix < nix as isize {
                        *acc += (wv * a_row[ix as usize] as i32) as i64;
                    }
                }
            }
        }
    }
}

/// ReLU forward: clamps negatives to zero and records a 1-bit mask of the
/// strictly positive pre-activations. An input of exactly zero yields a zero
/// mask bit, so backward passes treat it as inactive.
pub fn relu_forward(o: &FxpTensor) -> (FxpTensor, BitTensor) {
    let mut a = FxpTensor::zeros(o.dims(), o.fmt());
    let mut mask = BitTensor::new(o.raw().len());
    for (i, &v) in o.raw().iter().enumerate() {
        if v > 0 {
            a.raw_mut()[i] = v;
            mask.set(i, true);
        }
    }
    (a, mask)
}

/// Max-pooling forward over non-overlapping k x k windows. Returns the pooled
/// tensor and, per window, the index of the winning position encoded as
/// `dy * k + dx` (row-major within the window). Ties keep the first maximum
/// in that scan order.
pub fn maxpool_forward(a: &FxpTensor, k: usize) -> (FxpTensor, PoolIdx) {
    let [nix, niy, nc, _] = a.dims();
    assert!(nix % k == 0 && niy % k == 0, "pool window must tile the input exactly");
    let (nox, noy) = (nix / k, niy / k);
    let mut out = FxpTensor::zeros3(nox, noy, nc, a.fmt());
    let mut idx = PoolIdx::new([nox, noy, nc], k);
    for c in 0..nc {
        for y in 0..noy {
            for x in 0..nox {
                let mut best = i16::MIN;
                let mut code = 0u8;
                for dy in 0..k {
                    let base = a.idx(x * k, y * k + dy, c, 0);
                    for dx in 0..k {
                        let v = a.raw()[base + dx];
                        if v > best {
                            best = v;
                            code = (dy * k + dx) as u8;
                        }
                    }
                }
                let o = out.idx(x, y, c, 0);
                out.raw_mut()[o] = best;
                idx.set(x, y, c, code);
            }
        }
    }
    (out, idx)
}

/// Loss value and gradient at the network output. `scores` is (1, 1, classes).
///
/// * Euclidean: C = 1/2 * sum (a_i - y_i)^2 against a one-hot target,
///   gradient a_i - y_i.
/// * Square hinge: with t_i = +1 for the label and -1 otherwise,
///   C = sum max(0, 1 - t_i a_i)^2, gradient -2 t_i max(0, 1 - t_i a_i).
///
/// The loss value is for reporting only and is computed in f64 from the
/// quantized scores; the gradient is requantized to `grad_fmt`.
pub fn compute_loss(
    scores: &FxpTensor,
    label: u8,
    kind: LossKind,
    grad_fmt: QFormat,
    rounder: &mut Rounder,
) -> (f64, FxpTensor) {
    let [nx, ny, classes, _] = scores.dims();
    assert_eq!((nx, ny), (1, 1), "loss expects a flat score vector");
    assert!((label as usize) < classes, "label out of range");
    let af = scores.fmt().frac_bits();
    let one = 1i64 << af;
    let scale = one as f64;
    let mut grad = FxpTensor::zeros3(1, 1, classes, grad_fmt);
    let mut loss = 0.0f64;
    for i in 0..classes {
        let a = scores.raw()[i] as i64;
        match kind {
            LossKind::Euclidean => {
                let y = if i == label as usize { one } else { 0 };
                let d = a - y;
                loss += 0.5 * (d as f64 / scale) * (d as f64 / scale);
                grad.raw_mut()[i] = rounder.requantize_raw(d, af, grad_fmt);
            }
            LossKind::SquareHinge => {
                let t: i64 = if i == label as usize { 1 } else { -1 };
                let margin = one - t * a;
                if margin > 0 {
                    loss += (margin as f64 / scale) * (margin as f64 / scale);
                    grad.raw_mut()[i] = rounder.requantize_raw(-2 * t * margin, af, grad_fmt);
                }
            }
        }
    }
    (loss, grad)
}

/// Backward data pass of a convolution: propagates output-side gradients to
/// the layer's input, optionally gating each element by the ReLU mask of the
/// unit that produced that input (`None` when the producer was not a ReLU,
/// e.g. a pooling stage).
///
/// This is the full correlation with the kernel flipped 180 degrees and its
/// channel axes interchanged: reading it as a gather,
/// d_in[xi, yi, c] = sum over (f, ky, kx) of
///   w[kx, ky, c, f] * d_out[(xi + pad - kx)/s, (yi + pad - ky)/s, f]
/// with only stride-aligned, in-range output positions contributing.
#[allow(clippy::too_many_arguments)] // geometry (stride/pad) + three formats are all load-bearing
pub fn conv_backward_data(
    delta_out: &FxpTensor,
    w: &FxpTensor,
    in_dims: [usize; 3],
    mask_in: Option<&BitTensor>,
    stride: usize,
    pad: usize,
    grad_fmt: QFormat,
    rounder: &mut Rounder,
) -> FxpTensor {
    let [nox, noy, nof, _] = delta_out.dims();
    let [nkx, nky, nif, wof] = w.dims();
    assert_eq!(nof, wof, "kernel filter count must match gradient channels");
    let [nix, niy, dif] = in_dims;
    assert_eq!(nif, dif, "kernel input channels must match requested input dims");
    assert_eq!(nox, conv_out_extent(nix, nkx, stride, pad), "gradient extent mismatch");
    assert_eq!(noy, conv_out_extent(niy, nky, stride, pad), "gradient extent mismatch");
    if let Some(m) = mask_in {
        assert_eq!(m.len(), nix * niy * nif, "mask length mismatch");
    }
    let acc_frac = delta_out.fmt().frac_bits() + w.fmt().frac_bits();
    let mut out = FxpTensor::zeros3(nix, niy, nif, grad_fmt);

    if stride == 1 {
        let d_max = max_abs(delta_out);
        // Per input channel c the reduction taps are w[ . , . , c, . ].
        let mut chan_bound = vec![0i64; nif];
        for f in 0..nof {
            for c in 0..nif {
                let base = w.idx(0, 0, c, f);
                chan_bound[c] += w.raw()[base..base + nkx * nky]
                    .iter()
                    .map(|&v| v.unsigned_abs() as i64)
                    .sum::<i64>();
            }
        }
        let mut row32 = vec![0i32; nix];
        let mut row64 = vec![0i64; nix];
        for c in 0..nif {
            let fast = d_max * chan_bound[c] <= i32::MAX as i64;
            for yi in 0..niy {
                let base = out.idx(0, yi, c, 0);
                if fast {
                    row32[..nix].fill(0);
                    accum_bwd_row_i32(delta_out, w, pad, c, yi, &mut row32);
                    finalize_masked_row(
                        &row32.iter().map(|&v| v as i64).collect::<Vec<_>>(),
                        mask_in,
                        base,
                        acc_frac,
                        grad_fmt,
                        rounder,
                        &mut out,
                        false,
                    );
                } else {
                    row64[..nix].fill(0);
                    accum_bwd_row_i64(delta_out, w, pad, c, yi, &mut row64);
                    finalize_masked_row(
                        &row64, mask_in, base, acc_frac, grad_fmt, rounder, &mut out, true,
                    );
                }
            }
        }
    } else {
        // General stride: scatter each output gradient into the positions it
        // came from. Rare path; clarity over speed.
        let mut acc = vec![0i64; nix * niy * nif];
        for f in 0..nof {
            for oy in 0..noy {
                for ox in 0..nox {
                    let dv = delta_out.raw()[delta_out.idx(ox, oy, f, 0)] as i64;
                    if dv == 0 {
                        continue;
                    }
                    for c in 0..nif {
                        for ky in 0..nky {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= niy as isize {
                                continue;
                            }
                            for kx in 0..nkx {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= nix as isize {
                                    continue;
                                }
                                let wv = w.raw()[w.idx(kx, ky, c, f)] as i64;
                                acc[out.idx(ix as usize, iy as usize, c, 0)] += wv * dv;
                            }
                        }
                    }
                }
            }
        }
        for (i, &sum) in acc.iter().enumerate() {
            let gated = match mask_in {
                Some(m) => m.get(i),
                None => true,
            };
            if gated {
                assert!(
                    i32::try_from(sum).is_ok(),
                    "32-bit accumulator overflow in conv backward (sum {sum} at {i})"
                );
                out.raw_mut()[i] = rounder.requantize_raw(sum, acc_frac, grad_fmt);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn finalize_masked_row(
    sums: &[i64],
    mask_in: Option<&BitTensor>,
    base: usize,
    acc_frac: u8,
    grad_fmt: QFormat,
    rounder: &mut Rounder,
    out: &mut FxpTensor,
    check_range: bool,
) {
    for (x, &sum) in sums.iter().enumerate() {
        let gated = match mask_in {
            Some(m) => m.get(base + x),
            None => true,
        };
        if !gated {
            continue;
        }
        if check_range {
            assert!(
                i32::try_from(sum).is_ok(),
                "32-bit accumulator overflow in conv backward (sum {sum} at {})",
                base + x
            );
        }
        out.raw_mut()[base + x] = rounder.requantize_raw(sum, acc_frac, grad_fmt);
    }
}

fn accum_bwd_row_i32(
    delta_out: &FxpTensor,
    w: &FxpTensor,
    pad: usize,
    c: usize,
    yi: usize,
    row: &mut [i32],
) {
    let [nox, noy, nof, _] = delta_out.dims();
    let [nkx, nky, _, _] = w.dims();
    let nix = row.len();
    for f in 0..nof {
        for ky in 0..nky {
            let oy = yi as isize + pad as isize - ky as isize;
            if oy < 0 || oy >= noy as isize {
                continue;
            }
            let d_base = delta_out.idx(0, oy as usize, f, 0);
            let d_row = &delta_out.raw()[d_base..d_base + nox];
            let w_base = w.idx(0, ky, c, f);
            for kx in 0..nkx {
                let wv = w.raw()[w_base + kx] as i32;
                if wv == 0 {
                    continue;
                }
                // ox = xi + pad - kx stays in range for a contiguous xi span.
                let off = pad as isize - kx as isize;
                let xi_lo = (-off).max(0) as usize;
                let xi_hi = nix.min((nox as isize - off).max(0) as usize);
                if xi_lo >= xi_hi {
                    continue;
                }
                let src = &d_row[(xi_lo as isize + off) as usize..(xi_hi as isize + off) as usize];
                for (acc, &dv) in row[xi_lo..xi_hi].iter_mut().zip(src) {
                    *acc = acc.wrapping_add(wv.wrapping_mul(dv as i32));
                }
            }
        }
    }
}

fn accum_bwd_row_i64(
    delta_out: &FxpTensor,
    w: &FxpTensor,
    pad: usize,
    c: usize,
    yi: usize,
    row: &mut [i64],
) {
    let [nox, noy, nof, _] = delta_out.dims();
    let [nkx, nky, _, _] = w.dims();
    let nix = row.len();
    for f in 0..nof {
        for ky in 0..nky {
            let oy = yi as isize + pad as isize - ky as isize;
            if oy < 0 || oy >= noy as isize {
                continue;
            }
            let d_base = delta_out.idx(0, oy as usize, f, 0);
            let d_row = &delta_out.raw()[d_base..d_base + nox];
            let w_base = w.idx(0, ky, c, f);
            for kx in 0..nkx {
                let wv = w.raw()[w_base + kx] as i32;
                if wv == 0 {
                    continue;
                }
                for xi in 0..nix {
                    let ox = xi as isize + pad as isize - kx as isize;
                    if ox >= 0 && ox < nox as isize {
                        row[xi] += (wv * d_row[ox as usize] as i32) as i64;
                    }
                }
            }
        }
    }
}

/// Weight-gradient pass of a convolution:
/// dw[kx, ky, c, f] = sum over (x, y) of d_out[x, y, f] * a[x*s + kx - pad, y*s + ky - pad, c],
/// each element requantized once to `wgrad_fmt`.
#[allow(clippy::too_many_arguments)] // geometry (stride/pad) + three formats are all load-bearing
pub fn conv_weight_gradient(
    a: &FxpTensor,
    delta_out: &FxpTensor,
    nkx: usize,
    nky: usize,
    stride: usize,
    pad: usize,
    wgrad_fmt: QFormat,
    rounder: &mut Rounder,
) -> FxpTensor {
    let [nix, niy, nif, _] = a.dims();
    let [nox, noy, nof, _] = delta_out.dims();
    assert_eq!(nox, conv_out_extent(nix, nkx, stride, pad), "gradient extent mismatch");
    assert_eq!(noy, conv_out_extent(niy, nky, stride, pad), "gradient extent mismatch");
    let acc_frac = a.fmt().frac_bits() + delta_out.fmt().frac_bits();
    let mut out = FxpTensor::zeros([nkx, nky, nif, nof], wgrad_fmt);

    let a_max = max_abs(a);
    // Per filter f the delta plane is the shared factor across all (kx,ky,c).
    let plane = nox * noy;
    for f in 0..nof {
        let d_base = delta_out.idx(0, 0, f, 0);
        let d_plane = &delta_out.raw()[d_base..d_base + plane];
        let d_sum_abs: i64 = d_plane.iter().map(|&v| v.unsigned_abs() as i64).sum();
        let fast = a_max * d_sum_abs <= i32::MAX as i64;
        for c in 0..nif {
            for ky in 0..nky {
                for kx in 0..nkx {
                    let mut sum = 0i64;
                    let mut sum32 = 0i32;
                    for y in 0..noy {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= niy as isize {
                            continue;
                        }
                        let a_base = a.idx(0, iy as usize, c, 0);
                        let a_row = &a.raw()[a_base..a_base + nix];
                        let d_row = &d_plane[y * nox..y * nox + nox];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            let x_lo = (-off).max(0) as usize;
                            let x_hi = nox.min((nix as isize - off).max(0) as usize);
                            if x_lo >= x_hi {
                                continue;
                            }
                            let src =
                                &a_row[(x_lo as isize + off) as usize..(x_hi as isize + off) as usize];
                            if fast {
                                for (&dv, &av) in d_row[x_lo..x_hi].iter().zip(src) {
                                    sum32 = sum32
                                        .wrapping_add((dv as i32).wrapping_mul(av as i32));
                                }
                            } else {
                                for (&dv, &av) in d_row[x_lo..x_hi].iter().zip(src) {
                                    sum += (dv as i32 * av as i32) as i64;
                                }
                            }
                        } else {
                            for x in 0..nox {
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < nix as isize {
                                    sum += (d_row[x] as i32 * a_row[ix as usize] as i32) as i64;
                                }
                            }
                        }
                    }
                    if fast && stride == 1 {
                        sum = sum32 as i64;
                    } else {
                        assert!(
                            i32::try_from(sum).is_ok(),
                            "32-bit accumulator overflow in weight gradient (sum {sum})"
                        );
                    }
                    let o = out.idx(kx, ky, c, f);
                    out.raw_mut()[o] = rounder.requantize_raw(sum, acc_frac, wgrad_fmt);
                }
            }
        }
    }
    out
}

/// Backward pass of max pooling: routes each pooled gradient to the window
/// position recorded at forward time, zeroes everywhere else, and gates the
/// result by the ReLU mask of the layer below the pool (when there was one).
/// Values are moved verbatim — same format, no requantization.
pub fn upsample_pool_gradient(
    delta_pooled: &FxpTensor,
    idx: &PoolIdx,
    mask_below: Option<&BitTensor>,
) -> FxpTensor {
    let [pox, poy, nc, _] = delta_pooled.dims();
    let k = idx.k();
    assert_eq!(idx.dims(), [pox, poy, nc], "pool index dims mismatch");
    let (nix, niy) = (pox * k, poy * k);
    if let Some(m) = mask_below {
        assert_eq!(m.len(), nix * niy * nc, "mask length mismatch");
    }
    let mut out = FxpTensor::zeros3(nix, niy, nc, delta_pooled.fmt());
    for c in 0..nc {
        for y in 0..poy {
            for x in 0..pox {
                let v = delta_pooled.raw()[delta_pooled.idx(x, y, c, 0)];
                if v == 0 {
                    continue;
                }
                let code = idx.get(x, y, c) as usize;
                let (dy, dx) = (code / k, code % k);
                let o = out.idx(x * k + dx, y * k + dy, c, 0);
                let gated = match mask_below {
                    Some(m) => m.get(o),
                    None => true,
                };
                if gated {
                    out.raw_mut()[o] = v;
                }
            }
        }
    }
    out
}

/// One momentum step for a whole weight tensor.
///
/// The saved state `v` is the previous applied update step, so the recurrence
/// is the classical heavy-ball form: v_n = beta*v_{n-1} - alpha*g_n and
/// w_n = w_{n-1} + v_n. Per element, in this exact order:
/// 1. average the batch-summed gradient: g = requant(dw_sum * inv_batch);
/// 2. scale: t_a = requant(alpha * g), t_b = requant(beta * v_prev);
/// 3. new step: v = sat(t_b - t_a), stored for the next batch;
/// 4. apply: w_new = requant(w + v), one rounding at the finer precision.
///
/// Returns (w_new, v); the caller keeps v as next step's v_prev. With
/// beta = 0 this reduces bit-exactly to plain SGD.
pub fn sgd_momentum_update(
    w: &FxpTensor,
    dw_sum: &FxpTensor,
    v_prev: &FxpTensor,
    alpha: Fxp,
    beta: Fxp,
    inv_batch: Fxp,
    rounder: &mut Rounder,
) -> (FxpTensor, FxpTensor) {
    assert_eq!(w.dims(), dw_sum.dims());
    assert_eq!(w.dims(), v_prev.dims());
    assert_eq!(dw_sum.fmt(), v_prev.fmt());
    let wg_fmt = dw_sum.fmt();
    let (wf, gf) = (w.fmt().frac_bits(), wg_fmt.frac_bits());
    let sf = alpha.fmt().frac_bits();
    assert_eq!(alpha.fmt(), beta.fmt());
    assert_eq!(alpha.fmt(), inv_batch.fmt());

    let mut w_new = FxpTensor::zeros(w.dims(), w.fmt());
    let mut v_new = FxpTensor::zeros(w.dims(), wg_fmt);
    // The final combine runs at the finer of the two fractional precisions so
    // aligning is a lossless left shift; the one rounding is the requantize.
    let cf = wf.max(gf);
    for i in 0..w.raw().len() {
        let g = rounder.requantize_raw(
            dw_sum.raw()[i] as i64 * inv_batch.raw() as i64,
            gf + sf,
            wg_fmt,
        );
        let t_a = rounder.requantize_raw(alpha.raw() as i64 * g as i64, sf + gf, wg_fmt);
        let t_b = rounder.requantize_raw(
            beta.raw() as i64 * v_prev.raw()[i] as i64,
            sf + gf,
            wg_fmt,
        );
        let v = rounder.requantize_raw(t_b as i64 - t_a as i64, gf, wg_fmt);
        v_new.raw_mut()[i] = v;
        let sum = ((w.raw()[i] as i64) << (cf - wf)) + ((v as i64) << (cf - gf));
        w_new.raw_mut()[i] = rounder.requantize_raw(sum, cf, w.fmt());
    }
    (w_new, v_new)
}
