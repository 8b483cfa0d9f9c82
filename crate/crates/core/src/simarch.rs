//! Cycle-approximate machine model.
//!
//! Two halves share the compiled plan:
//!
//! * **Timing** ([`simulate`]): prices every schedule entry on the MAC array
//!   and a single-channel DRAM model, with or without double buffering, and
//!   aggregates latency by phase and traffic by purpose.
//! * **Function** ([`TiledMachine`]): executes training through the tiled
//!   dataflow — banked weight fetches, per-tile 32-bit partial sums held
//!   across input-channel tiles, one requantize per output after the full
//!   reduction. Because integer addition is order-independent, its results
//!   are bit-identical to the reference kernels under deterministic
//!   rounding; stochastic rounding consumes the stream in a different order
//!   and is excluded from that guarantee.
//!
//! Latency of one entry execution with double buffering is
//! `min(max(logic, dram) + prime, logic + dram)` where `prime` is one
//! instance of each read stream (the first tile's operands cannot overlap
//! with anything); without double buffering logic and DRAM serialize.

use std::path::Path;

use serde::Serialize;

use crate::compiler::{
    compile, BufferEstimate, Direction, Phase, Plan, Purpose, ScheduleEntry, Tiles, TransferGroup,
};
use crate::fxp::{QFormat, Rounder};
use crate::golden::tensor::{BitTensor, FxpTensor};
use crate::golden::ops;
use crate::golden::train::{ForwardTrace, TrainState};
use crate::model::{Config, Dataset, HardwareConfig, LayerKind, LayerSpec, NetworkSpec};
use crate::xposebuf::XposeBuf;
use crate::{Error, Result};

/// Single-channel DRAM: every transfer pays a fixed setup plus its bits at
/// the sustained bandwidth, expressed in core clock cycles.
#[derive(Debug, Clone, Copy)]
pub struct DramModel {
    pub bits_per_cycle: f64,
    pub setup_cycles: u64,
}

impl DramModel {
    pub fn new(hw: &HardwareConfig) -> DramModel {
        DramModel {
            bits_per_cycle: hw.dram_bandwidth_bits_per_s / hw.clock_hz,
            setup_cycles: hw.dram_setup_cycles,
        }
    }

    /// Cycles one transfer of `bytes` occupies the channel. Zero-byte
    /// transfers don't exist and cost nothing.
    pub fn transfer_cycles(&self, bytes: u64) -> u64 {
        if bytes == 0 {
            return 0;
        }
        self.setup_cycles + ((bytes as f64) * 8.0 / self.bits_per_cycle).ceil() as u64
    }

    fn group_cycles(&self, g: &TransferGroup) -> u64 {
        g.instances * self.transfer_cycles(g.bytes)
    }
}

/// Per-iteration timing of one schedule entry.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EntryTiming {
    pub layer: usize,
    pub phase: Phase,
    pub times: u64,
    /// Array/unit busy cycles over the whole iteration.
    pub logic_cycles: u64,
    /// DRAM channel occupancy over the whole iteration.
    pub dram_cycles: u64,
    /// Non-overlappable head start per execution (double buffering only).
    pub prime_cycles: u64,
    /// Wall-clock cycles over the whole iteration.
    pub latency_cycles: u64,
}

fn time_entry(e: &ScheduleEntry, dram: &DramModel, double_buffering: bool) -> EntryTiming {
    let logic = e.logic_cycles();
    let d_all: u64 = e.transfers.iter().map(|g| dram.group_cycles(g)).sum();
    let d_first: u64 =
        e.transfers.iter().filter(|g| !g.skip_first).map(|g| dram.group_cycles(g)).sum();
    let prime: u64 = e
        .transfers
        .iter()
        .filter(|g| g.dir == Direction::Read && !g.skip_first)
        .map(|g| dram.transfer_cycles(g.bytes))
        .sum();
    let lat = |d: u64| {
        if double_buffering {
            // Overlap bounded below by the serial schedule: the machine can
            // always fall back to not overlapping.
            (logic.max(d) + prime).min(logic + d)
        } else {
            logic + d
        }
    };
    EntryTiming {
        layer: e.layer,
        phase: e.phase,
        times: e.times,
        logic_cycles: logic * e.times,
        dram_cycles: d_first + (e.times - 1) * d_all,
        prime_cycles: prime,
        latency_cycles: lat(d_first) + (e.times - 1) * lat(d_all),
    }
}

/// Latency aggregated over one phase.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PhaseBreakdown {
    pub phase: Phase,
    pub logic_cycles: u64,
    pub dram_cycles: u64,
    pub latency_cycles: u64,
}

/// Traffic aggregated over one purpose, per iteration.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrafficRow {
    pub purpose: Purpose,
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub read_cycles: u64,
    pub write_cycles: u64,
}

/// Timing report for one batch iteration of a plan.
#[derive(Debug, Clone)]
pub struct SimReport {
    pub clock_hz: f64,
    pub mac_units: u64,
    pub batch_size: u64,
    pub iteration_macs: u64,
    pub iteration_cycles: u64,
    pub entries: Vec<EntryTiming>,
    pub phases: Vec<PhaseBreakdown>,
    pub traffic: Vec<TrafficRow>,
    pub buffers: BufferEstimate,
}

/// Op-count basis used by every throughput figure this module prints.
pub const GOPS_BASIS: &str =
    "2 * multiply-accumulates of the forward, data-gradient and weight-gradient convolutions";

impl SimReport {
    pub fn iteration_seconds(&self) -> f64 {
        self.iteration_cycles as f64 / self.clock_hz
    }

    /// Billions of operations per second, counting 2 ops per true MAC of the
    /// three convolution families and nothing else.
    pub fn gops(&self) -> f64 {
        2.0 * self.iteration_macs as f64 / self.iteration_seconds() / 1e9
    }

    /// MAC-array occupancy over the whole iteration (true MACs over lane
    /// capacity).
    pub fn utilization(&self) -> f64 {
        self.iteration_macs as f64 / (self.mac_units as f64 * self.iteration_cycles as f64)
    }

    pub fn images_per_second(&self) -> f64 {
        self.batch_size as f64 / self.iteration_seconds()
    }

    pub fn epoch_cycles(&self, batches: u64) -> u64 {
        batches * self.iteration_cycles
    }

    /// Latency shares of the three training stages: forward, backward
    /// (data gradients + gradient upsampling), weight update (gradient
    /// computation + application). Sums to 1.
    pub fn stage_shares(&self) -> [(&'static str, f64); 3] {
        let total = self.iteration_cycles as f64;
        let of = |p: Phase| {
            self.phases.iter().find(|b| b.phase == p).map_or(0, |b| b.latency_cycles) as f64
        };
        [
            ("fp", of(Phase::Fp) / total),
            ("bp", (of(Phase::Bp) + of(Phase::Upsample)) / total),
            ("wu", (of(Phase::WuGradient) + of(Phase::WuUpdate)) / total),
        ]
    }
}

/// Prices a compiled plan. Purely analytic: no data is touched.
pub fn simulate(plan: &Plan) -> SimReport {
    let dram = DramModel::new(&plan.hw);
    let entries: Vec<EntryTiming> =
        plan.entries.iter().map(|e| time_entry(e, &dram, plan.hw.double_buffering)).collect();
    let all_phases = [Phase::Fp, Phase::Bp, Phase::WuGradient, Phase::WuUpdate, Phase::Upsample];
    let phases = all_phases
        .iter()
        .map(|&p| {
            let mut b = PhaseBreakdown { phase: p, logic_cycles: 0, dram_cycles: 0, latency_cycles: 0 };
            for t in entries.iter().filter(|t| t.phase == p) {
                b.logic_cycles += t.logic_cycles;
                b.dram_cycles += t.dram_cycles;
                b.latency_cycles += t.latency_cycles;
            }
            b
        })
        .collect();
    let traffic = Purpose::ALL
        .iter()
        .map(|&purpose| {
            let mut row = TrafficRow {
                purpose,
                read_bytes: 0,
                write_bytes: 0,
                read_cycles: 0,
                write_cycles: 0,
            };
            for e in &plan.entries {
                for g in e.transfers.iter().filter(|g| g.purpose == purpose) {
                    let times = e.times - g.skip_first as u64;
                    let bytes = g.bytes * g.instances * times;
                    let cycles = dram.group_cycles(g) * times;
                    if g.dir == Direction::Read {
                        row.read_bytes += bytes;
                        row.read_cycles += cycles;
                    } else {
                        row.write_bytes += bytes;
                        row.write_cycles += cycles;
                    }
                }
            }
            row
        })
        .collect();
    SimReport {
        clock_hz: plan.hw.clock_hz,
        mac_units: plan.mac_units,
        batch_size: plan.net.batch_size as u64,
        iteration_macs: plan.iteration_macs(),
        iteration_cycles: entries.iter().map(|t| t.latency_cycles).sum(),
        entries,
        phases,
        traffic,
        buffers: plan.buffers,
    }
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    version: u32,
    throughput: ThroughputDoc,
    phase: Vec<PhaseDoc>,
    traffic: &'a [TrafficRow],
    buffers: BuffersDoc,
}

#[derive(Serialize)]
struct ThroughputDoc {
    clock_hz: f64,
    mac_units: u64,
    batch_size: u64,
    iteration_macs: u64,
    iteration_cycles: u64,
    iteration_seconds: f64,
    images_per_second: f64,
    gops: f64,
    gops_basis: &'static str,
    utilization: f64,
}

#[derive(Serialize)]
struct PhaseDoc {
    name: String,
    latency_cycles: u64,
    logic_cycles: u64,
    dram_cycles: u64,
    share: f64,
}

#[derive(Serialize)]
struct BuffersDoc {
    #[serde(flatten)]
    classes: BufferEstimate,
    total_bits: u64,
    fits_budget: bool,
}

/// The report as a deterministic structured document.
pub fn report_toml(r: &SimReport) -> String {
    let doc = ReportDoc {
        version: 1,
        throughput: ThroughputDoc {
            clock_hz: r.clock_hz,
            mac_units: r.mac_units,
            batch_size: r.batch_size,
            iteration_macs: r.iteration_macs,
            iteration_cycles: r.iteration_cycles,
            iteration_seconds: r.iteration_seconds(),
            images_per_second: r.images_per_second(),
            gops: r.gops(),
            gops_basis: GOPS_BASIS,
            utilization: r.utilization(),
        },
        phase: r
            .phases
            .iter()
            .map(|b| PhaseDoc {
                name: b.phase.to_string(),
                latency_cycles: b.latency_cycles,
                logic_cycles: b.logic_cycles,
                dram_cycles: b.dram_cycles,
                share: b.latency_cycles as f64 / r.iteration_cycles as f64,
            })
            .collect(),
        traffic: &r.traffic,
        buffers: BuffersDoc {
            classes: r.buffers,
            total_bits: r.buffers.total_bits(),
            fits_budget: r.buffers.fits(),
        },
    };
    toml::to_string(&doc).expect("report serialization cannot fail")
}

/// Per-entry timing table (CSV, CRLF line ends).
pub fn latency_csv(r: &SimReport) -> String {
    let mut s = String::from(
        "entry,layer,phase,times,logic_cycles,dram_cycles,prime_cycles,latency_cycles\r\n",
    );
    for (i, t) in r.entries.iter().enumerate() {
        s.push_str(&format!(
            "{i},{},{},{},{},{},{},{}\r\n",
            t.layer, t.phase, t.times, t.logic_cycles, t.dram_cycles, t.prime_cycles, t.latency_cycles
        ));
    }
    s
}

/// Traffic per purpose (CSV, CRLF line ends).
pub fn dram_csv(r: &SimReport) -> String {
    let mut s = String::from("purpose,read_bytes,write_bytes,read_cycles,write_cycles\r\n");
    for row in &r.traffic {
        s.push_str(&format!(
            "{},{},{},{},{}\r\n",
            row.purpose, row.read_bytes, row.write_bytes, row.read_cycles, row.write_cycles
        ));
    }
    s
}

/// Buffer classes (CSV, CRLF line ends).
pub fn buffers_csv(r: &SimReport) -> String {
    let b = &r.buffers;
    let mut s = String::from("class,bits\r\n");
    for (name, bits) in [
        ("input", b.input_bits),
        ("weight", b.weight_bits),
        ("output", b.output_bits),
        ("index", b.index_bits),
        ("act_grad", b.act_grad_bits),
        ("weight_grad", b.weight_grad_bits),
        ("old_new_weight", b.old_new_weight_bits),
        ("total", b.total_bits()),
        ("budget", b.budget_bits),
    ] {
        s.push_str(&format!("{name},{bits}\r\n"));
    }
    s
}

/// Writes `report.toml`, `latency.csv`, `dram.csv` and `buffers.csv`.
pub fn write_report(r: &SimReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, contents) in [
        ("report.toml", report_toml(r)),
        ("latency.csv", latency_csv(r)),
        ("dram.csv", dram_csv(r)),
        ("buffers.csv", buffers_csv(r)),
    ] {
        let p = dir.join(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Functional tiled execution
// ---------------------------------------------------------------------------

/// Forward convolution through the banked weight buffer, tiled: per output
/// tile a 32-bit partial sum survives across input-channel tiles and is
/// requantized exactly once at the end of the reduction.
pub fn tiled_conv_forward(
    l: &LayerSpec,
    tiles: Tiles,
    xbuf: &XposeBuf,
    w_fmt: QFormat,
    a: &FxpTensor,
    out_fmt: QFormat,
    rounder: &mut Rounder,
) -> FxpTensor {
    let [nix, niy, nif, _] = a.dims();
    debug_assert_eq!(nif, l.nif);
    let (nox, noy, nof) = (l.nox, l.noy, l.nof);
    let (tox, toy, tof, tif) =
        (tiles.ox.min(nox), tiles.oy.min(noy), tiles.of.min(nof), tiles.r#if.min(nif));
    let pof = xbuf.pof();
    let taps = l.nkx * l.nky;
    let acc_frac = a.fmt().frac_bits() + w_fmt.frac_bits();
    let mut out = FxpTensor::zeros3(nox, noy, nof, out_fmt);
    let mut acc = vec![0i64; tof * toy * tox];
    for f0 in (0..nof).step_by(tof) {
        let f1 = (f0 + tof).min(nof);
        for y0 in (0..noy).step_by(toy) {
            let y1 = (y0 + toy).min(noy);
            for x0 in (0..nox).step_by(tox) {
                let x1 = (x0 + tox).min(nox);
                let (tx, ty) = (x1 - x0, y1 - y0);
                acc[..(f1 - f0) * ty * tx].fill(0);
                for c0 in (0..nif).step_by(tif) {
                    let c1 = (c0 + tif).min(nif);
                    for r in c0..c1 {
                        for g in f0 / pof..=(f1 - 1) / pof {
                            for j in 0..taps {
                                let lanes = xbuf.read_fp(g, r, j);
                                let (ky, kx) = (j / l.nkx, j % l.nkx);
                                for (lane, &wv) in lanes.iter().enumerate() {
                                    let f = g * pof + lane;
                                    if f < f0 || f >= f1 || wv == 0 {
                                        continue;
                                    }
                                    let wv = wv as i64;
                                    for yy in y0..y1 {
                                        let iy = (yy * l.stride + ky) as isize - l.pad as isize;
                                        if iy < 0 || iy >= niy as isize {
                                            continue;
                                        }
                                        let a_base = a.idx(0, iy as usize, r, 0);
                                        let dst =
                                            ((f - f0) * ty + (yy - y0)) * tx;
                                        for xx in x0..x1 {
                                            let ix =
                                                (xx * l.stride + kx) as isize - l.pad as isize;
                                            if ix < 0 || ix >= nix as isize {
                                                continue;
                                            }
                                            acc[dst + (xx - x0)] +=
                                                wv * a.raw()[a_base + ix as usize] as i64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for f in f0..f1 {
                    for yy in y0..y1 {
                        let src = ((f - f0) * ty + (yy - y0)) * tx;
                        let base = out.idx(x0, yy, f, 0);
                        for xx in 0..tx {
                            let sum = acc[src + xx];
                            assert!(
                                i32::try_from(sum).is_ok(),
                                "32-bit accumulator overflow in conv forward (sum {sum})"
                            );
                            out.raw_mut()[base + xx] =
                                rounder.requantize_raw(sum, acc_frac, out_fmt);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward data convolution through the transposed read port. The output
/// space is the layer input; masked elements are never requantized and stay
/// zero, exactly like the reference kernel.
#[allow(clippy::too_many_arguments)]
pub fn tiled_conv_backward(
    l: &LayerSpec,
    tiles: Tiles,
    xbuf: &XposeBuf,
    w_fmt: QFormat,
    delta_out: &FxpTensor,
    mask_in: Option<&BitTensor>,
    grad_fmt: QFormat,
    rounder: &mut Rounder,
) -> FxpTensor {
    let [nox, noy, nof, _] = delta_out.dims();
    debug_assert_eq!(nof, l.nof);
    let (nix, niy, nif) = (l.nix, l.niy, l.nif);
    if let Some(m) = mask_in {
        assert_eq!(m.len(), nix * niy * nif, "mask length mismatch");
    }
    let (tox, toy, tof, tif) =
        (tiles.ox.min(nix), tiles.oy.min(niy), tiles.of.min(nif), tiles.r#if.min(nof));
    let pof = xbuf.pof();
    let taps = l.nkx * l.nky;
    let acc_frac = delta_out.fmt().frac_bits() + w_fmt.frac_bits();
    let mut out = FxpTensor::zeros3(nix, niy, nif, grad_fmt);
    let mut acc = vec![0i64; tof * toy * tox];
    for c0 in (0..nif).step_by(tof) {
        let c1 = (c0 + tof).min(nif);
        for y0 in (0..niy).step_by(toy) {
            let y1 = (y0 + toy).min(niy);
            for x0 in (0..nix).step_by(tox) {
                let x1 = (x0 + tox).min(nix);
                let (tx, ty) = (x1 - x0, y1 - y0);
                acc[..(c1 - c0) * ty * tx].fill(0);
                for fc0 in (0..nof).step_by(tif) {
                    let fc1 = (fc0 + tif).min(nof);
                    for f in fc0..fc1 {
                        for q in c0 / pof..=(c1 - 1) / pof {
                            for j in 0..taps {
                                let lanes = xbuf.read_bp(f, q, j);
                                // Flipped tap j is original tap taps-1-j.
                                let orig = taps - 1 - j;
                                let (ky, kx) = (orig / l.nkx, orig % l.nkx);
                                for (i, &wv) in lanes.iter().enumerate() {
                                    let c = q * pof + i;
                                    if c < c0 || c >= c1 || wv == 0 {
                                        continue;
                                    }
                                    let wv = wv as i64;
                                    for yi in y0..y1 {
                                        let oy_num = yi as isize + l.pad as isize - ky as isize;
                                        if oy_num < 0 || oy_num % l.stride as isize != 0 {
                                            continue;
                                        }
                                        let oy = oy_num as usize / l.stride;
                                        if oy >= noy {
                                            continue;
                                        }
                                        let d_base = delta_out.idx(0, oy, f, 0);
                                        let dst = ((c - c0) * ty + (yi - y0)) * tx;
                                        for xi in x0..x1 {
                                            let ox_num =
                                                xi as isize + l.pad as isize - kx as isize;
                                            if ox_num < 0 || ox_num % l.stride as isize != 0 {
                                                continue;
                                            }
                                            let ox = ox_num as usize / l.stride;
                                            if ox >= nox {
                                                continue;
                                            }
                                            acc[dst + (xi - x0)] +=
                                                wv * delta_out.raw()[d_base + ox] as i64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for c in c0..c1 {
                    for yi in y0..y1 {
                        let src = ((c - c0) * ty + (yi - y0)) * tx;
                        let base = out.idx(x0, yi, c, 0);
                        for xi in 0..tx {
                            let gated = match mask_in {
                                Some(m) => m.get(base + xi),
                                None => true,
                            };
                            if !gated {
                                continue;
                            }
                            let sum = acc[src + xi];
                            assert!(
                                i32::try_from(sum).is_ok(),
                                "32-bit accumulator overflow in conv backward (sum {sum})"
                            );
                            out.raw_mut()[base + xi] =
                                rounder.requantize_raw(sum, acc_frac, grad_fmt);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Weight-gradient convolution, tiled over the reduction space (the local
/// gradient map): partial sums per kernel tap survive across reduction tiles
/// and are requantized once.
pub fn tiled_weight_gradient(
    l: &LayerSpec,
    tiles: Tiles,
    a: &FxpTensor,
    delta_out: &FxpTensor,
    wgrad_fmt: QFormat,
    rounder: &mut Rounder,
) -> FxpTensor {
    let [nix, niy, nif, _] = a.dims();
    let [nox, noy, nof, _] = delta_out.dims();
    debug_assert_eq!((nif, nof), (l.nif, l.nof));
    let (rtx, rty, tof) = (tiles.ox.min(nox), tiles.oy.min(noy), tiles.of.min(nof));
    let acc_frac = a.fmt().frac_bits() + delta_out.fmt().frac_bits();
    let taps = l.nkx * l.nky;
    let mut out = FxpTensor::zeros([l.nkx, l.nky, nif, nof], wgrad_fmt);
    let mut acc = vec![0i64; taps * nif * tof];
    for f0 in (0..nof).step_by(tof) {
        let f1 = (f0 + tof).min(nof);
        acc[..taps * nif * (f1 - f0)].fill(0);
        for ry0 in (0..noy).step_by(rty) {
            let ry1 = (ry0 + rty).min(noy);
            for rx0 in (0..nox).step_by(rtx) {
                let rx1 = (rx0 + rtx).min(nox);
                for f in f0..f1 {
                    for c in 0..nif {
                        for ky in 0..l.nky {
                            for kx in 0..l.nkx {
                                let dst = ((f - f0) * nif + c) * taps + ky * l.nkx + kx;
                                let mut sum = 0i64;
                                for y in ry0..ry1 {
                                    let iy = (y * l.stride + ky) as isize - l.pad as isize;
                                    if iy < 0 || iy >= niy as isize {
                                        continue;
                                    }
                                    let a_base = a.idx(0, iy as usize, c, 0);
                                    let d_base = delta_out.idx(0, y, f, 0);
                                    for x in rx0..rx1 {
                                        let ix = (x * l.stride + kx) as isize - l.pad as isize;
                                        if ix >= 0 && ix < nix as isize {
                                            sum += delta_out.raw()[d_base + x] as i64
                                                * a.raw()[a_base + ix as usize] as i64;
                                        }
                                    }
                                }
                                acc[dst] += sum;
                            }
                        }
                    }
                }
            }
        }
        for f in f0..f1 {
            for c in 0..nif {
                for ky in 0..l.nky {
                    let base = out.idx(0, ky, c, f);
                    for kx in 0..l.nkx {
                        let sum = acc[((f - f0) * nif + c) * taps + ky * l.nkx + kx];
                        assert!(
                            i32::try_from(sum).is_ok(),
                            "32-bit accumulator overflow in weight gradient (sum {sum})"
                        );
                        out.raw_mut()[base + kx] = rounder.requantize_raw(sum, acc_frac, wgrad_fmt);
                    }
                }
            }
        }
    }
    out
}

/// Training machine that runs every MAC-array pass through the tiled,
/// banked-buffer dataflow. Pooling, ReLU, the loss and the elementwise
/// update run on their scalar units, shared with the reference
/// implementation.
#[derive(Debug)]
pub struct TiledMachine {
    pub plan: Plan,
    pub state: TrainState,
    xbufs: Vec<Option<XposeBuf>>,
}

impl TiledMachine {
    pub fn new(cfg: &Config) -> Result<TiledMachine> {
        Self::from_state(TrainState::new(cfg)?, &cfg.hw)
    }

    /// Wraps an existing training state (e.g. one restored from a
    /// checkpoint) without touching its weights or rounding stream.
    pub fn from_state(state: TrainState, hw: &HardwareConfig) -> Result<TiledMachine> {
        let plan = compile(&state.net, hw)?;
        let xbufs = state
            .weights
            .iter()
            .map(|w| w.as_ref().map(|w| XposeBuf::from_tensor(w, hw.pof)))
            .collect();
        Ok(TiledMachine { plan, state, xbufs })
    }

    fn mask_of_input<'t>(
        net: &NetworkSpec,
        trace: &'t ForwardTrace,
        i: usize,
    ) -> Option<&'t BitTensor> {
        let mut j = i;
        while j > 0 {
            j -= 1;
            match net.layers[j].kind {
                LayerKind::Flatten => continue,
                LayerKind::Conv | LayerKind::FullyConnected => return trace.masks[j].as_ref(),
                _ => return None,
            }
        }
        None
    }

    /// Forward pass of one image through the tiled dataflow, saving
    /// everything backward needs.
    pub fn forward_trace(&mut self, image: &FxpTensor) -> ForwardTrace {
        let n = self.state.net.layers.len();
        let mut trace = ForwardTrace {
            layer_inputs: Vec::with_capacity(n),
            masks: vec![None; n],
            pool_codes: vec![None; n],
        };
        let mut cur = image.clone();
        for i in 0..n {
            let l = self.state.net.layers[i];
            trace.layer_inputs.push(cur.clone());
            match l.kind {
                LayerKind::Conv | LayerKind::FullyConnected => {
                    let xb = self.xbufs[i].as_ref().expect("mac layer has a weight buffer");
                    let o = tiled_conv_forward(
                        &l,
                        self.plan.tiles,
                        xb,
                        self.state.formats.weights,
                        &cur,
                        self.state.formats.activations,
                        &mut self.state.rounder,
                    );
                    if l.relu {
                        let (act, m) = ops::relu_forward(&o);
                        cur = act;
                        trace.masks[i] = Some(m);
                    } else {
                        cur = o;
                    }
                }
                LayerKind::MaxPool => {
                    let (p, codes) = ops::maxpool_forward(&cur, l.nkx);
                    cur = p;
                    trace.pool_codes[i] = Some(codes);
                }
                LayerKind::Flatten => cur.reshape([1, 1, l.nof, 1]),
                LayerKind::Loss => {}
            }
        }
        trace
    }

    /// Backward pass of one image; adds requantized weight gradients into
    /// `dw_sums` (saturating) and returns the loss.
    pub fn backward(
        &mut self,
        trace: &ForwardTrace,
        label: u8,
        dw_sums: &mut [Option<FxpTensor>],
    ) -> f64 {
        let last = self.state.net.layers.len() - 1;
        debug_assert_eq!(self.state.net.layers[last].kind, LayerKind::Loss);
        let (loss, mut delta) = ops::compute_loss(
            &trace.layer_inputs[last],
            label,
            self.state.net.loss,
            self.state.formats.gradients,
            &mut self.state.rounder,
        );
        let first_mac = self.state.first_mac();
        for i in (0..last).rev() {
            let l = self.state.net.layers[i];
            match l.kind {
                LayerKind::Conv | LayerKind::FullyConnected => {
                    let dw = tiled_weight_gradient(
                        &l,
                        self.plan.tiles,
                        &trace.layer_inputs[i],
                        &delta,
                        self.state.formats.weight_gradients,
                        &mut self.state.rounder,
                    );
                    let sum = dw_sums[i].as_mut().expect("mac layer has a gradient slot");
                    for (s, &v) in sum.raw_mut().iter_mut().zip(dw.raw()) {
                        *s = self.state.rounder.add_sat_raw(*s, v);
                    }
                    if Some(i) == first_mac {
                        break;
                    }
                    let mask = Self::mask_of_input(&self.state.net, trace, i);
                    let xb = self.xbufs[i].as_ref().expect("mac layer has a weight buffer");
                    delta = tiled_conv_backward(
                        &l,
                        self.plan.tiles,
                        xb,
                        self.state.formats.weights,
                        &delta,
                        mask,
                        self.state.formats.gradients,
                        &mut self.state.rounder,
                    );
                }
                LayerKind::MaxPool => {
                    let mask = Self::mask_of_input(&self.state.net, trace, i);
                    delta = ops::upsample_pool_gradient(
                        &delta,
                        trace.pool_codes[i].as_ref().expect("pool layer has codes"),
                        mask,
                    );
                }
                LayerKind::Flatten => delta.reshape(trace.layer_inputs[i].dims()),
                LayerKind::Loss => unreachable!(),
            }
        }
        loss
    }

    /// One full batch; mirrors the reference batch exactly (same update
    /// unit), then reloads the weight buffers. Returns the mean loss.
    pub fn train_batch(&mut self, images: &[&FxpTensor], labels: &[u8]) -> f64 {
        assert_eq!(images.len(), labels.len());
        assert!(!images.is_empty());
        let mut dw_sums: Vec<Option<FxpTensor>> = self
            .state
            .net
            .layers
            .iter()
            .map(|l| {
                l.is_mac_layer().then(|| {
                    FxpTensor::zeros(
                        [l.nkx, l.nky, l.nif, l.nof],
                        self.state.formats.weight_gradients,
                    )
                })
            })
            .collect();
        let mut loss_total = 0.0;
        for (img, &label) in images.iter().zip(labels) {
            let trace = self.forward_trace(img);
            loss_total += self.backward(&trace, label, &mut dw_sums);
        }
        for i in 0..self.state.net.layers.len() {
            if let Some(sum) = &dw_sums[i] {
                let w = self.state.weights[i].as_ref().expect("mac layer has weights");
                let prev = self.state.momentum[i].as_ref().expect("mac layer has momentum");
                let (w_new, v_new) = ops::sgd_momentum_update(
                    w,
                    sum,
                    prev,
                    self.state.alpha,
                    self.state.beta,
                    self.state.inv_batch,
                    &mut self.state.rounder,
                );
                self.xbufs[i] = Some(XposeBuf::from_tensor(&w_new, self.plan.hw.pof));
                self.state.weights[i] = Some(w_new);
                self.state.momentum[i] = Some(v_new);
            }
        }
        self.state.batches_done += 1;
        loss_total / images.len() as f64
    }

    /// One pass over the dataset in full batches; a trailing partial batch
    /// is dropped, matching the reference loop.
    pub fn run_epoch(&mut self, data: &Dataset) -> f64 {
        let bs = self.state.net.batch_size;
        let batches = data.len() / bs;
        let mut total = 0.0;
        for b in 0..batches {
            let imgs: Vec<&FxpTensor> = data.images[b * bs..(b + 1) * bs].iter().collect();
            total += self.train_batch(&imgs, &data.labels[b * bs..(b + 1) * bs]);
        }
        self.state.epochs_done += 1;
        if batches > 0 {
            total / batches as f64
        } else {
            0.0
        }
    }

    /// Evaluation scores of one image through the tiled dataflow, on a
    /// scratch rounder so the training stream never advances.
    pub fn scores(&self, image: &FxpTensor, rounder: &mut Rounder) -> FxpTensor {
        let mut cur = image.clone();
        for (i, l) in self.state.net.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Conv | LayerKind::FullyConnected => {
                    let xb = self.xbufs[i].as_ref().expect("mac layer has a weight buffer");
                    let o = tiled_conv_forward(
                        l,
                        self.plan.tiles,
                        xb,
                        self.state.formats.weights,
                        &cur,
                        self.state.formats.activations,
                        rounder,
                    );
                    cur = if l.relu { ops::relu_forward(&o).0 } else { o };
                }
                LayerKind::MaxPool => cur = ops::maxpool_forward(&cur, l.nkx).0,
                LayerKind::Flatten => cur.reshape([1, 1, l.nof, 1]),
                LayerKind::Loss => break,
            }
        }
        cur
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_network, parse_config};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dram_model_prices_setup_plus_bandwidth() {
        let hw = HardwareConfig::default();
        let d = DramModel::new(&hw);
        // 16.9e9 / 240e6 = 70.41(6) bits per cycle.
        assert!((d.bits_per_cycle - 70.41666).abs() < 1e-3);
        assert_eq!(d.transfer_cycles(0), 0);
        // 88 bytes = 704 bits -> exactly 10 data cycles + 30 setup.
        assert_eq!(d.transfer_cycles(88), 40);
        assert_eq!(d.transfer_cycles(1), 31);
    }

    #[test]
    fn double_buffering_is_never_slower_and_wins_on_real_nets() {
        let net = builtin_network("cifar10_1x").unwrap();
        let on = simulate(&compile(&net, &HardwareConfig::builtin("1x").unwrap()).unwrap());
        let off_hw = HardwareConfig { double_buffering: false, ..HardwareConfig::builtin("1x").unwrap() };
        let off = simulate(&compile(&net, &off_hw).unwrap());
        for (a, b) in on.entries.iter().zip(&off.entries) {
            assert!(a.latency_cycles <= b.latency_cycles, "entry {}/{} got slower", a.layer, a.phase);
        }
        assert!(on.iteration_cycles < off.iteration_cycles);
    }

    #[test]
    fn phase_latency_sums_to_the_iteration_and_shares_to_one() {
        let net = builtin_network("cifar10_1x").unwrap();
        let r = simulate(&compile(&net, &HardwareConfig::builtin("1x").unwrap()).unwrap());
        let total: u64 = r.phases.iter().map(|b| b.latency_cycles).sum();
        assert_eq!(total, r.iteration_cycles);
        let share_sum: f64 = r.stage_shares().iter().map(|(_, s)| s).sum();
        assert!((share_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn traffic_table_conserves_entry_dram_cycles_and_bytes() {
        let net = builtin_network("cifar10_1x").unwrap();
        let plan = compile(&net, &HardwareConfig::builtin("1x").unwrap()).unwrap();
        let r = simulate(&plan);
        let entry_cycles: u64 = r.entries.iter().map(|t| t.dram_cycles).sum();
        let table_cycles: u64 = r.traffic.iter().map(|t| t.read_cycles + t.write_cycles).sum();
        assert_eq!(entry_cycles, table_cycles);
        let table_read: u64 = r.traffic.iter().map(|t| t.read_bytes).sum();
        let table_write: u64 = r.traffic.iter().map(|t| t.write_bytes).sum();
        assert_eq!(table_read, plan.iteration_bytes(Direction::Read));
        assert_eq!(table_write, plan.iteration_bytes(Direction::Write));
    }

    #[test]
    fn report_documents_are_well_formed() {
        let net = builtin_network("cifar10_1x").unwrap();
        let r = simulate(&compile(&net, &HardwareConfig::builtin("1x").unwrap()).unwrap());
        let doc = report_toml(&r);
        assert!(doc.contains("gops_basis"));
        assert!(doc.contains("mac_units = 1024"));
        let reparsed: toml::Value = toml::from_str(&doc).unwrap();
        assert!(reparsed.get("throughput").is_some());
        assert!(latency_csv(&r).ends_with("\r\n"));
        assert!(dram_csv(&r).lines().count() == 1 + Purpose::ALL.len());
        assert!(buffers_csv(&r).contains("old_new_weight"));
        assert!(r.gops() > 0.0 && r.utilization() > 0.0 && r.utilization() <= 1.0);
    }

    fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4], fmt: QFormat) -> FxpTensor {
        let mut t = FxpTensor::zeros(dims, fmt);
        for v in t.raw_mut() {
            *v = rng.gen_range(-300..=300);
        }
        t
    }

    fn conv_layer(nix: usize, niy: usize, nif: usize, nof: usize, k: usize, stride: usize, pad: usize) -> LayerSpec {
        LayerSpec {
            index: 0,
            kind: LayerKind::Conv,
            nix,
            niy,
            nif,
            nox: ops::conv_out_extent(nix, k, stride, pad),
            noy: ops::conv_out_extent(niy, k, stride, pad),
            nof,
            nkx: k,
            nky: k,
            stride,
            pad,
            relu: false,
        }
    }

    #[test]
    fn tiled_kernels_match_the_reference_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let fmt_a = QFormat::Q8_8;
        let fmt_w = QFormat::Q2_14;
        let fmt_g = QFormat::Q8_8;
        let fmt_wg = QFormat::Q2_14;
        for (l, tiles, pof) in [
            (conv_layer(7, 5, 3, 5, 3, 1, 1), Tiles { ox: 3, oy: 2, of: 2, r#if: 2 }, 2),
            (conv_layer(6, 6, 4, 4, 3, 2, 1), Tiles { ox: 2, oy: 3, of: 3, r#if: 3 }, 4),
            (conv_layer(4, 4, 5, 7, 1, 1, 0), Tiles { ox: 4, oy: 4, of: 16, r#if: 16 }, 8),
            // FC shape: kernel covers the whole input.
            (conv_layer(3, 3, 6, 9, 3, 1, 0), Tiles { ox: 1, oy: 1, of: 4, r#if: 1 }, 4),
        ] {
            let a = random_tensor(&mut rng, [l.nix, l.niy, l.nif, 1], fmt_a);
            let w = random_tensor(&mut rng, [l.nkx, l.nky, l.nif, l.nof], fmt_w);
            let d = random_tensor(&mut rng, [l.nox, l.noy, l.nof, 1], fmt_g);
            let xb = XposeBuf::from_tensor(&w, pof);
            let mut mask = BitTensor::new(l.nix * l.niy * l.nif);
            for i in 0..mask.len() {
                mask.set(i, rng.gen_bool(0.6));
            }

            let mut r1 = Rounder::nearest_even();
            let mut r2 = Rounder::nearest_even();
            let want = ops::conv_forward(&a, &w, l.stride, l.pad, fmt_a, &mut r1);
            let got = tiled_conv_forward(&l, tiles, &xb, fmt_w, &a, fmt_a, &mut r2);
            assert_eq!(want, got, "forward mismatch for {}x{} k{} s{}", l.nix, l.niy, l.nkx, l.stride);
            assert_eq!(r1.saturations(), r2.saturations());

            for m in [None, Some(&mask)] {
                let mut r1 = Rounder::nearest_even();
                let mut r2 = Rounder::nearest_even();
                let want = ops::conv_backward_data(
                    &d, &w, [l.nix, l.niy, l.nif], m, l.stride, l.pad, fmt_g, &mut r1,
                );
                let got = tiled_conv_backward(&l, tiles, &xb, fmt_w, &d, m, fmt_g, &mut r2);
                assert_eq!(want, got, "backward mismatch (mask: {})", m.is_some());
                assert_eq!(r1.saturations(), r2.saturations());
            }

            let mut r1 = Rounder::nearest_even();
            let mut r2 = Rounder::nearest_even();
            let want = ops::conv_weight_gradient(
                &a, &d, l.nkx, l.nky, l.stride, l.pad, fmt_wg, &mut r1,
            );
            let got = tiled_weight_gradient(&l, tiles, &a, &d, fmt_wg, &mut r2);
            assert_eq!(want, got, "weight gradient mismatch");
            assert_eq!(r1.saturations(), r2.saturations());
        }
    }

    fn tiny_cfg() -> Config {
        parse_config(
            r#"
seed = 11
[network]
name = "tiny"
description = "4C3-P-FC"
input = [8, 8, 3]
num_classes = 4
[training]
batch_size = 4
learning_rate = 0.05
momentum = 0.5
[hardware]
pox = 4
poy = 4
pof = 4
tile_ox = 4
tile_oy = 4
tile_of = 4
tile_if = 2
"#,
        )
        .unwrap()
    }

    #[test]
    fn tiled_training_is_bit_identical_to_the_reference() {
        let cfg = tiny_cfg();
        let mut gold = TrainState::new(&cfg).unwrap();
        let mut tiled = TiledMachine::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let images: Vec<FxpTensor> = (0..8)
            .map(|_| random_tensor(&mut rng, [8, 8, 3, 1], cfg.formats.activations))
            .collect();
        let labels: Vec<u8> = (0..8).map(|_| rng.gen_range(0..4)).collect();
        for b in 0..2 {
            let imgs: Vec<&FxpTensor> = images[b * 4..b * 4 + 4].iter().collect();
            let lg = gold.train_batch(&imgs, &labels[b * 4..b * 4 + 4]);
            let lt = tiled.train_batch(&imgs, &labels[b * 4..b * 4 + 4]);
            assert_eq!(lg.to_bits(), lt.to_bits(), "loss diverged at batch {b}");
        }
        assert_eq!(gold.weights, tiled.state.weights);
        assert_eq!(gold.momentum, tiled.state.momentum);
        assert_eq!(gold.saturations(), tiled.state.saturations());
        let mut r1 = Rounder::nearest_even();
        let mut r2 = Rounder::nearest_even();
        assert_eq!(
            gold.scores_with(&images[0], &mut r1),
            tiled.scores(&images[0], &mut r2)
        );
    }

    #[test]
    fn load_balancing_cuts_weight_update_latency() {
        let net = builtin_network("cifar10_1x").unwrap();
        let on = simulate(&compile(&net, &HardwareConfig::builtin("1x").unwrap()).unwrap());
        let off_hw =
            HardwareConfig { load_balancing: false, ..HardwareConfig::builtin("1x").unwrap() };
        let off = simulate(&compile(&net, &off_hw).unwrap());
        let wu = |r: &SimReport| {
            r.phases
                .iter()
                .find(|b| b.phase == Phase::WuGradient)
                .unwrap()
                .logic_cycles
        };
        assert!(wu(&on) < wu(&off));
    }
}
