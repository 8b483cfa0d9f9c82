//! Planning: turns a (network, hardware) pair into a tiled, ordered schedule
//! with per-entry MAC-trip counts, DRAM transfer lists, and an on-chip buffer
//! estimate checked against the budget.
//!
//! A plan covers one batch iteration. Per image it holds forward entries in
//! layer order, then a backward sweep in reverse order (weight-gradient entry
//! before the data-gradient entry of the same layer, pool layers contribute
//! upsample entries); at batch end one weight-update entry per Conv/FC layer.
//! ReLU, flatten and the loss are affiliated: they ride on the neighboring
//! key-layer entries and never appear as entries of their own.
//!
//! Conventions baked into the numbers:
//! * Tile extents are caps; every entry clamps them to its own geometry, and
//!   edge tiles use their true (smaller) extents.
//! * MAC trips per tile are `taps * channel_chunk * ceil(tf/pof) *
//!   ceil(tx/pox) * ceil(ty/poy)`; extents that are not unroll multiples run
//!   with masked (idle) lanes. A systolic fill of `pox + poy` cycles is
//!   charged once per tile step.
//! * Weight-gradient entries divide their per-tile trips by the load-balance
//!   factor (rounded up); the factor packs `(pox/nkx)*(poy/nky)` kernel
//!   gradients into one array pass.
//! * DRAM bytes count logical words (16-bit). Weights move in logical kernel
//!   size regardless of the banked padding, so traffic is a function of the
//!   tiling only, never of unroll factors.
//! * The running weight-gradient sum is re-read per image except for the
//!   first image of the batch, which initializes it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::golden::tensor::PoolIdx;
use crate::model::{validate_network, HardwareConfig, LayerKind, LayerSpec, NetworkSpec};
use crate::xposebuf::XposeBuf;
use crate::{Error, Result};

/// Schedule phases. Weight update is split into its convolution part
/// (gradient computation on the MAC array) and the elementwise new-weight
/// computation, because the two have very different latency profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fp,
    Bp,
    WuGradient,
    WuUpdate,
    Upsample,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Fp => "fp",
            Phase::Bp => "bp",
            Phase::WuGradient => "wu_gradient",
            Phase::WuUpdate => "wu_update",
            Phase::Upsample => "upsample",
        })
    }
}

/// Operand roles on the MAC array per phase: (streamed input, stationary
/// operand, produced output). Phases that bypass the array return `None`.
pub fn mac_roles(phase: Phase) -> Option<[&'static str; 3]> {
    match phase {
        Phase::Fp => Some(["activations", "weights", "activations"]),
        Phase::Bp => Some(["local_gradients", "flipped_weights", "local_gradients"]),
        Phase::WuGradient => Some(["activations", "local_gradients", "weight_gradients"]),
        Phase::WuUpdate | Phase::Upsample => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Read,
    Write,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if *self == Direction::Read { "read" } else { "write" })
    }
}

/// What a DRAM transfer moves. Mirrors the traffic breakdown in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Activations,
    Weights,
    LocalGradients,
    WeightGradients,
    PoolIndices,
    ReluMasks,
}

impl Purpose {
    pub const ALL: [Purpose; 6] = [
        Purpose::Activations,
        Purpose::Weights,
        Purpose::LocalGradients,
        Purpose::WeightGradients,
        Purpose::PoolIndices,
        Purpose::ReluMasks,
    ];
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Purpose::Activations => "activations",
            Purpose::Weights => "weights",
            Purpose::LocalGradients => "local_gradients",
            Purpose::WeightGradients => "weight_gradients",
            Purpose::PoolIndices => "pool_indices",
            Purpose::ReluMasks => "relu_masks",
        })
    }
}

/// A group of identical DRAM transfers within one entry execution:
/// `instances` transfers of `bytes` bytes each. `skip_first` marks groups
/// absent from the entry's first execution in the iteration (the running
/// weight-gradient sum has nothing to read back for the first image).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferGroup {
    pub dir: Direction,
    pub purpose: Purpose,
    pub bytes: u64,
    pub instances: u64,
    pub skip_first: bool,
}

/// One scheduled unit of work: a whole layer-phase, executed `times` per
/// batch iteration. Tile extents are the entry's own effective caps; for
/// weight-gradient entries `tile_ox`/`tile_oy` tile the reduction space
/// (the local-gradient map) and `tile_if` is 1 (channels iterate serially).
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleEntry {
    pub layer: usize,
    pub phase: Phase,
    /// Executions per batch iteration: batch size for per-image work, 1 for
    /// the batch-end weight update.
    pub times: u64,
    pub tile_ox: usize,
    pub tile_oy: usize,
    pub tile_of: usize,
    pub tile_if: usize,
    /// Tile steps per execution (DRAM-visible working-set swaps).
    pub tiles: u64,
    /// MAC-array trips per execution (load balancing already applied), or
    /// the unit's cycle count for non-array phases.
    pub trips: u64,
    /// Pipeline-fill cycles per execution: (pox + poy) per tile step on the
    /// MAC array, zero for comparator/streaming units.
    pub fill: u64,
    pub factor: u64,
    /// True multiply-accumulates per execution (op-count basis; zero for
    /// pooling, upsampling and the elementwise update).
    pub macs: u64,
    pub transfers: Vec<TransferGroup>,
}

impl ScheduleEntry {
    pub fn logic_cycles(&self) -> u64 {
        self.trips + self.fill
    }

    /// Bytes moved in one execution, honoring `skip_first` for the given
    /// execution index within the iteration.
    pub fn execution_bytes(&self, dir: Direction, first: bool) -> u64 {
        self.transfers
            .iter()
            .filter(|t| t.dir == dir && !(first && t.skip_first))
            .map(|t| t.bytes * t.instances)
            .sum()
    }

    /// Bytes moved per batch iteration in one direction.
    pub fn iteration_bytes(&self, dir: Direction) -> u64 {
        self.transfers
            .iter()
            .filter(|t| t.dir == dir)
            .map(|t| t.bytes * t.instances * (self.times - t.skip_first as u64))
            .sum()
    }

    /// Per-iteration bytes for one purpose (both directions).
    pub fn iteration_purpose_bytes(&self, purpose: Purpose) -> u64 {
        self.transfers
            .iter()
            .filter(|t| t.purpose == purpose)
            .map(|t| t.bytes * t.instances * (self.times - t.skip_first as u64))
            .sum()
    }
}

/// On-chip memory estimate in bits, one field per buffer class. Weight-side
/// classes hold whole layers (sized by the largest); the rest hold tiles and
/// double when double buffering is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BufferEstimate {
    pub input_bits: u64,
    pub weight_bits: u64,
    pub output_bits: u64,
    pub index_bits: u64,
    pub act_grad_bits: u64,
    pub weight_grad_bits: u64,
    pub old_new_weight_bits: u64,
    pub budget_bits: u64,
}

impl BufferEstimate {
    pub fn total_bits(&self) -> u64 {
        self.input_bits
            + self.weight_bits
            + self.output_bits
            + self.index_bits
            + self.act_grad_bits
            + self.weight_grad_bits
            + self.old_new_weight_bits
    }

    pub fn fits(&self) -> bool {
        self.total_bits() <= self.budget_bits
    }
}

/// Resolved tile caps used to build a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Tiles {
    pub ox: usize,
    pub oy: usize,
    pub of: usize,
    pub r#if: usize,
}

/// A complete plan for one batch iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub net: NetworkSpec,
    pub hw: HardwareConfig,
    pub tiles: Tiles,
    pub entries: Vec<ScheduleEntry>,
    pub buffers: BufferEstimate,
    pub mac_units: u64,
}

impl Plan {
    /// Total true MACs per batch iteration (the GOPS op basis divides this
    /// by time and multiplies by 2).
    pub fn iteration_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs * e.times).sum()
    }

    pub fn iteration_bytes(&self, dir: Direction) -> u64 {
        self.entries.iter().map(|e| e.iteration_bytes(dir)).sum()
    }

    pub fn iteration_purpose_bytes(&self, purpose: Purpose) -> u64 {
        self.entries.iter().map(|e| e.iteration_purpose_bytes(purpose)).sum()
    }
}

/// Kernel gradients computed in parallel during weight-gradient convolutions:
/// floor(pox/nkx) * floor(poy/nky), at least 1, when the kernel fits the
/// array and balancing is enabled; 1 otherwise.
pub fn load_balance_factor(pox: usize, poy: usize, nkx: usize, nky: usize, enabled: bool) -> u64 {
    if !enabled || nkx == 0 || nky == 0 || nkx > pox || nky > poy {
        return 1;
    }
    (((pox / nkx) * (poy / nky)) as u64).max(1)
}

/// Splits extent `n` into chunks of at most `t`.
fn segments(n: usize, t: usize) -> Vec<usize> {
    assert!(n > 0 && t > 0);
    let mut out = Vec::with_capacity(n.div_ceil(t));
    let mut rem = n;
    while rem > 0 {
        let c = rem.min(t);
        out.push(c);
        rem -= c;
    }
    out
}

/// Deterministically ordered accumulator for transfer groups.
#[derive(Default)]
struct Groups(BTreeMap<(Direction, Purpose, u64, bool), u64>);

impl Groups {
    fn add(&mut self, dir: Direction, purpose: Purpose, bytes: u64, instances: u64) {
        self.add_opt(dir, purpose, bytes, instances, false);
    }

    fn add_opt(&mut self, dir: Direction, purpose: Purpose, bytes: u64, instances: u64, skip_first: bool) {
        if bytes == 0 || instances == 0 {
            return;
        }
        *self.0.entry((dir, purpose, bytes, skip_first)).or_insert(0) += instances;
    }

    fn into_vec(self) -> Vec<TransferGroup> {
        self.0
            .into_iter()
            .map(|((dir, purpose, bytes, skip_first), instances)| TransferGroup {
                dir,
                purpose,
                bytes,
                instances,
                skip_first,
            })
            .collect()
    }
}

/// ceil(bits / 8): DRAM bytes for a bit-packed stream.
fn bit_bytes(bits: u64) -> u64 {
    bits.div_ceil(8)
}

/// Input span covered by `t` outputs of a convolution: (t-1)*stride + k,
/// clamped to the physical extent (halo past the border is padding, never
/// fetched).
fn window(t: usize, stride: usize, k: usize, extent: usize) -> usize {
    ((t - 1) * stride + k).min(extent)
}

fn conv_fp_entry(l: &LayerSpec, hw: &HardwareConfig, tiles: Tiles, batch: usize) -> ScheduleEntry {
    let (tox, toy, tof, tif) =
        (tiles.ox.min(l.nox), tiles.oy.min(l.noy), tiles.of.min(l.nof), tiles.r#if.min(l.nif));
    let (xs, ys, fs, cs) =
        (segments(l.nox, tox), segments(l.noy, toy), segments(l.nof, tof), segments(l.nif, tif));
    let taps = (l.nkx * l.nky) as u64;
    let mut g = Groups::default();
    g.add(Direction::Read, Purpose::Weights, 2 * l.kernel_words() as u64, 1);
    let mut trips = 0u64;
    let mut steps = 0u64;
    for &f in &fs {
        for &y in &ys {
            for &x in &xs {
                let out_elems = (x * y * f) as u64;
                g.add(Direction::Write, Purpose::Activations, 2 * out_elems, 1);
                if l.relu {
                    g.add(Direction::Write, Purpose::ReluMasks, bit_bytes(out_elems), 1);
                }
                for &c in &cs {
                    let win = (window(x, l.stride, l.nkx, l.nix)
                        * window(y, l.stride, l.nky, l.niy)
                        * c) as u64;
                    g.add(Direction::Read, Purpose::Activations, 2 * win, 1);
                    trips += taps
                        * c as u64
                        * (f.div_ceil(hw.pof) * x.div_ceil(hw.pox) * y.div_ceil(hw.poy)) as u64;
                    steps += 1;
                }
            }
        }
    }
    ScheduleEntry {
        layer: l.index,
        phase: Phase::Fp,
        times: batch as u64,
        tile_ox: tox,
        tile_oy: toy,
        tile_of: tof,
        tile_if: tif,
        tiles: steps,
        trips,
        fill: steps * (hw.pox + hw.poy) as u64,
        factor: 1,
        macs: l.fp_macs(),
        transfers: g.into_vec(),
    }
}

fn pool_fp_entry(l: &LayerSpec, hw: &HardwareConfig, tiles: Tiles, batch: usize) -> ScheduleEntry {
    let k = l.nkx;
    let (tox, toy, tof) = (tiles.ox.min(l.nox), tiles.oy.min(l.noy), tiles.of.min(l.nof));
    let code_bits = PoolIdx::code_bits(k) as u64;
    let units = (hw.pox * hw.poy * hw.pof) as u64;
    let mut g = Groups::default();
    let mut cycles = 0u64;
    let mut steps = 0u64;
    for &f in &segments(l.nof, tof) {
        for &y in &segments(l.noy, toy) {
            for &x in &segments(l.nox, tox) {
                let pooled = (x * y * f) as u64;
                let in_elems = pooled * (k * k) as u64;
                g.add(Direction::Read, Purpose::Activations, 2 * in_elems, 1);
                g.add(Direction::Write, Purpose::Activations, 2 * pooled, 1);
                g.add(Direction::Write, Purpose::PoolIndices, bit_bytes(pooled * code_bits), 1);
                cycles += in_elems.div_ceil(units);
                steps += 1;
            }
        }
    }
    ScheduleEntry {
        layer: l.index,
        phase: Phase::Fp,
        times: batch as u64,
        tile_ox: tox,
        tile_oy: toy,
        tile_of: tof,
        tile_if: tof,
        tiles: steps,
        trips: cycles,
        fill: 0,
        factor: 1,
        macs: 0,
        transfers: g.into_vec(),
    }
}

/// Data-gradient entry: a convolution whose output space is the layer input.
/// `attach_scores` folds the affiliated loss-gradient read onto the entry;
/// `has_mask` adds the ReLU-mask stream that gates the produced gradients.
fn conv_bp_entry(
    l: &LayerSpec,
    hw: &HardwareConfig,
    tiles: Tiles,
    batch: usize,
    num_classes: usize,
    attach_scores: bool,
    has_mask: bool,
) -> ScheduleEntry {
    let (tox, toy, tof, tif) =
        (tiles.ox.min(l.nix), tiles.oy.min(l.niy), tiles.of.min(l.nif), tiles.r#if.min(l.nof));
    let taps = (l.nkx * l.nky) as u64;
    let mut g = Groups::default();
    g.add(Direction::Read, Purpose::Weights, 2 * l.kernel_words() as u64, 1);
    if attach_scores {
        g.add(Direction::Read, Purpose::Activations, 2 * num_classes as u64, 1);
    }
    let mut trips = 0u64;
    let mut steps = 0u64;
    for &f in &segments(l.nif, tof) {
        for &y in &segments(l.niy, toy) {
            for &x in &segments(l.nix, tox) {
                let out_elems = (x * y * f) as u64;
                g.add(Direction::Write, Purpose::LocalGradients, 2 * out_elems, 1);
                if has_mask {
                    g.add(Direction::Read, Purpose::ReluMasks, bit_bytes(out_elems), 1);
                }
                for &c in &segments(l.nof, tif) {
                    // The gather window over the upstream gradient map spans
                    // about (x + k - 1) / stride positions per axis.
                    let win = ((x + l.nkx - 1).div_ceil(l.stride).min(l.nox)
                        * (y + l.nky - 1).div_ceil(l.stride).min(l.noy)
                        * c) as u64;
                    g.add(Direction::Read, Purpose::LocalGradients, 2 * win, 1);
                    trips += taps
                        * c as u64
                        * (f.div_ceil(hw.pof) * x.div_ceil(hw.pox) * y.div_ceil(hw.poy)) as u64;
                    steps += 1;
                }
            }
        }
    }
    ScheduleEntry {
        layer: l.index,
        phase: Phase::Bp,
        times: batch as u64,
        tile_ox: tox,
        tile_oy: toy,
        tile_of: tof,
        tile_if: tif,
        tiles: steps,
        trips,
        fill: steps * (hw.pox + hw.poy) as u64,
        factor: 1,
        macs: l.fp_macs(),
        transfers: g.into_vec(),
    }
}

fn upsample_entry(
    l: &LayerSpec,
    hw: &HardwareConfig,
    tiles: Tiles,
    batch: usize,
    has_mask: bool,
) -> ScheduleEntry {
    let k = l.nkx;
    let (tox, toy, tof) = (tiles.ox.min(l.nox), tiles.oy.min(l.noy), tiles.of.min(l.nof));
    let code_bits = PoolIdx::code_bits(k) as u64;
    let units = (hw.pox * hw.poy * hw.pof) as u64;
    let mut g = Groups::default();
    let mut cycles = 0u64;
    let mut steps = 0u64;
    for &f in &segments(l.nof, tof) {
        for &y in &segments(l.noy, toy) {
            for &x in &segments(l.nox, tox) {
                let pooled = (x * y * f) as u64;
                let up = pooled * (k * k) as u64;
                g.add(Direction::Read, Purpose::LocalGradients, 2 * pooled, 1);
                g.add(Direction::Read, Purpose::PoolIndices, bit_bytes(pooled * code_bits), 1);
                if has_mask {
                    g.add(Direction::Read, Purpose::ReluMasks, bit_bytes(up), 1);
                }
                g.add(Direction::Write, Purpose::LocalGradients, 2 * up, 1);
                cycles += up.div_ceil(units);
                steps += 1;
            }
        }
    }
    ScheduleEntry {
        layer: l.index,
        phase: Phase::Upsample,
        times: batch as u64,
        tile_ox: tox,
        tile_oy: toy,
        tile_of: tof,
        tile_if: tof,
        tiles: steps,
        trips: cycles,
        fill: 0,
        factor: 1,
        macs: 0,
        transfers: g.into_vec(),
    }
}

/// Weight-gradient entry: per (filter tile, reduction tile) the local
/// gradients stream once while the input channels iterate serially; the
/// load-balance factor packs several channels' kernel gradients into one
/// array pass. The running sum lives in DRAM across the batch: read-back is
/// skipped for the first image.
fn wu_gradient_entry(
    l: &LayerSpec,
    hw: &HardwareConfig,
    tiles: Tiles,
    batch: usize,
    num_classes: usize,
    attach_scores: bool,
) -> ScheduleEntry {
    let (rtx, rty, tof) = (tiles.ox.min(l.nox), tiles.oy.min(l.noy), tiles.of.min(l.nof));
    let factor = load_balance_factor(hw.pox, hw.poy, l.nkx, l.nky, hw.load_balancing);
    let mut g = Groups::default();
    if attach_scores {
        g.add(Direction::Read, Purpose::Activations, 2 * num_classes as u64, 1);
    }
    let mut trips = 0u64;
    let mut steps = 0u64;
    for &f in &segments(l.nof, tof) {
        let sum_bytes = 2 * (l.nkx * l.nky * l.nif * f) as u64;
        g.add_opt(Direction::Read, Purpose::WeightGradients, sum_bytes, 1, true);
        g.add(Direction::Write, Purpose::WeightGradients, sum_bytes, 1);
        for &ry in &segments(l.noy, rty) {
            for &rx in &segments(l.nox, rtx) {
                g.add(Direction::Read, Purpose::LocalGradients, 2 * (rx * ry * f) as u64, 1);
                let a_win = (window(rx, l.stride, l.nkx, l.nix)
                    * window(ry, l.stride, l.nky, l.niy)) as u64;
                g.add(Direction::Read, Purpose::Activations, 2 * a_win, l.nif as u64);
                let per_tile = (rx * ry) as u64
                    * (f.div_ceil(hw.pof) * l.nkx.div_ceil(hw.pox) * l.nky.div_ceil(hw.poy))
                        as u64
                    * l.nif as u64;
                trips += per_tile.div_ceil(factor);
                steps += (l.nif as u64).div_ceil(factor);
            }
        }
    }
    ScheduleEntry {
        layer: l.index,
        phase: Phase::WuGradient,
        times: batch as u64,
        tile_ox: rtx,
        tile_oy: rty,
        tile_of: tof,
        tile_if: 1,
        tiles: steps,
        trips,
        fill: steps * (hw.pox + hw.poy) as u64,
        factor,
        macs: l.fp_macs(),
        transfers: g.into_vec(),
    }
}

/// Batch-end elementwise update: stream the summed gradient, the previous
/// step, and the old weights; write new weights and the new step. Runs at
/// one word per bank per cycle through the padded banked image.
fn wu_update_entry(l: &LayerSpec, hw: &HardwareConfig) -> ScheduleEntry {
    let words = l.kernel_words() as u64;
    let padded = XposeBuf::image_words_for(hw.pof, l.nkx, l.nky, l.nif, l.nof) as u64;
    let mut g = Groups::default();
    g.add(Direction::Read, Purpose::WeightGradients, 2 * words, 2); // sum + previous step
    g.add(Direction::Read, Purpose::Weights, 2 * words, 1);
    g.add(Direction::Write, Purpose::Weights, 2 * words, 1);
    g.add(Direction::Write, Purpose::WeightGradients, 2 * words, 1); // new step
    ScheduleEntry {
        layer: l.index,
        phase: Phase::WuUpdate,
        times: 1,
        tile_ox: 1,
        tile_oy: 1,
        tile_of: l.nof.min(hw.pof),
        tile_if: 1,
        tiles: 1,
        trips: padded / hw.pof as u64,
        fill: 0,
        factor: 1,
        macs: 0,
        transfers: g.into_vec(),
    }
}

/// ReLU mask guarding layer `i`'s input: present when the nearest upstream
/// Conv/FC (looking through flatten) has an affiliated ReLU.
fn input_has_mask(net: &NetworkSpec, i: usize) -> bool {
    let mut j = i;
    while j > 0 {
        j -= 1;
        match net.layers[j].kind {
            LayerKind::Flatten => continue,
            LayerKind::Conv | LayerKind::FullyConnected => return net.layers[j].relu,
            _ => return false,
        }
    }
    false
}

fn build_entries(net: &NetworkSpec, hw: &HardwareConfig, tiles: Tiles) -> Vec<ScheduleEntry> {
    let batch = net.batch_size;
    let first_mac = net.layers.iter().position(|l| l.is_mac_layer());
    let last_mac = net.layers.iter().rposition(|l| l.is_mac_layer());
    let mut entries = Vec::new();
    for l in &net.layers {
        match l.kind {
            LayerKind::Conv | LayerKind::FullyConnected => {
                entries.push(conv_fp_entry(l, hw, tiles, batch));
            }
            LayerKind::MaxPool => entries.push(pool_fp_entry(l, hw, tiles, batch)),
            LayerKind::Flatten | LayerKind::Loss => {}
        }
    }
    for l in net.layers.iter().rev() {
        match l.kind {
            LayerKind::Conv | LayerKind::FullyConnected => {
                let attach = Some(l.index) == last_mac;
                entries.push(wu_gradient_entry(l, hw, tiles, batch, net.num_classes, attach));
                if Some(l.index) != first_mac {
                    entries.push(conv_bp_entry(
                        l,
                        hw,
                        tiles,
                        batch,
                        net.num_classes,
                        false,
                        input_has_mask(net, l.index),
                    ));
                }
            }
            LayerKind::MaxPool => {
                entries.push(upsample_entry(l, hw, tiles, batch, input_has_mask(net, l.index)));
            }
            LayerKind::Flatten | LayerKind::Loss => {}
        }
    }
    for l in &net.layers {
        if l.is_mac_layer() {
            entries.push(wu_update_entry(l, hw));
        }
    }
    entries
}

impl BufferEstimate {
    /// Sizes every class for the given tile caps. Weight-side classes hold
    /// whole layers in the banked (padded) form and never double; every
    /// other class holds tiles and doubles under double buffering.
    pub fn compute(net: &NetworkSpec, hw: &HardwareConfig, tiles: Tiles) -> BufferEstimate {
        let db = if hw.double_buffering { 2u64 } else { 1 };
        let mut input = 0u64;
        let mut output = 0u64;
        let mut weight = 0u64;
        let mut index = 0u64;
        let mut act_grad = 0u64;
        let mut weight_grad = 0u64;
        for l in &net.layers {
            match l.kind {
                LayerKind::Conv | LayerKind::FullyConnected => {
                    let (tox, toy, tof, tif) = (
                        tiles.ox.min(l.nox),
                        tiles.oy.min(l.noy),
                        tiles.of.min(l.nof),
                        tiles.r#if.min(l.nif),
                    );
                    // Forward input window and backward gradient window both
                    // stage through the input buffers.
                    let fp_win = (window(tox, l.stride, l.nkx, l.nix)
                        * window(toy, l.stride, l.nky, l.niy)
                        * tif) as u64;
                    let bp_tox = tiles.ox.min(l.nix);
                    let bp_toy = tiles.oy.min(l.niy);
                    let bp_win = ((bp_tox + l.nkx - 1).div_ceil(l.stride).min(l.nox)
                        * (bp_toy + l.nky - 1).div_ceil(l.stride).min(l.noy)
                        * tiles.r#if.min(l.nof)) as u64;
                    let wu_win = (window(tox, l.stride, l.nkx, l.nix)
                        * window(toy, l.stride, l.nky, l.niy)) as u64;
                    input = input.max(16 * fp_win).max(16 * bp_win).max(16 * wu_win);
                    // 32-bit partial sums for the largest produced tile.
                    let out_elems =
                        ((tox * toy * tof) as u64).max((bp_tox * bp_toy * tiles.of.min(l.nif)) as u64);
                    output = output.max(32 * out_elems);
                    weight = weight.max(
                        16 * XposeBuf::image_words_for(hw.pof, l.nkx, l.nky, l.nif, l.nof) as u64,
                    );
                    if l.relu {
                        act_grad = act_grad.max((tox * toy * tof) as u64);
                    }
                    weight_grad = weight_grad.max(16 * (l.nkx * l.nky * l.nif * tof) as u64);
                }
                LayerKind::MaxPool => {
                    let (tox, toy, tof) =
                        (tiles.ox.min(l.nox), tiles.oy.min(l.noy), tiles.of.min(l.nof));
                    let pooled = (tox * toy * tof) as u64;
                    let k2 = (l.nkx * l.nky) as u64;
                    input = input.max(16 * pooled * k2);
                    output = output.max(16 * pooled);
                    index = index.max(pooled * PoolIdx::code_bits(l.nkx) as u64);
                }
                LayerKind::Flatten | LayerKind::Loss => {}
            }
        }
        BufferEstimate {
            input_bits: input * db,
            weight_bits: weight,
            output_bits: output * db,
            index_bits: index * db,
            act_grad_bits: act_grad * db,
            weight_grad_bits: weight_grad * db,
            old_new_weight_bits: 2 * weight,
            budget_bits: hw.buffer_budget_bits,
        }
    }
}

/// Picks tile caps. With `auto_tile` the caps start at the largest layer
/// extents and shrink greedily — input-channel tile first, then columns,
/// then rows, then filters — until the estimate fits the budget; the order
/// keeps the filter and row tiles (the reuse-heavy dimensions) large.
fn resolve_tiles(net: &NetworkSpec, hw: &HardwareConfig) -> Result<Tiles> {
    if !hw.auto_tile {
        return Ok(Tiles { ox: hw.tile_ox, oy: hw.tile_oy, of: hw.tile_of, r#if: hw.tile_if });
    }
    let max_nif = net.layers.iter().filter(|l| l.is_mac_layer()).map(|l| l.nif).max().unwrap_or(1);
    let mut t = Tiles {
        ox: net.max_nox().max(hw.pox),
        oy: net.max_noy().max(hw.poy),
        of: net.max_nof().max(hw.pof),
        r#if: max_nif,
    };
    loop {
        if BufferEstimate::compute(net, hw, t).fits() {
            return Ok(t);
        }
        if t.r#if > 1 {
            t.r#if = (t.r#if / 2).max(1);
        } else if t.ox > hw.pox {
            t.ox = (t.ox / 2).max(hw.pox);
        } else if t.oy > hw.poy {
            t.oy = (t.oy / 2).max(hw.poy);
        } else if t.of > hw.pof {
            t.of = (t.of / 2).max(hw.pof);
        } else {
            let e = BufferEstimate::compute(net, hw, t);
            return Err(Error::Infeasible(format!(
                "buffers need {} bits at minimum tiles, budget is {}",
                e.total_bits(),
                e.budget_bits
            )));
        }
    }
}

/// Structural verification: ordering, coverage and cadence of a built plan.
/// Compile always runs it; tests call it directly on mutated plans.
pub fn check_plan(plan: &Plan) -> Result<()> {
    let net = &plan.net;
    let err = |m: String| Err(Error::Verification(m));
    let first_mac = net.layers.iter().position(|l| l.is_mac_layer());

    // Phase regions: FP block, then the backward sweep, then updates.
    let mut region = 0; // 0 = fp, 1 = backward, 2 = update
    let mut prev_fp: Option<usize> = None;
    let mut prev_bwd: Option<usize> = None;
    for e in &plan.entries {
        let new_region = match e.phase {
            Phase::Fp => 0,
            Phase::Bp | Phase::WuGradient | Phase::Upsample => 1,
            Phase::WuUpdate => 2,
        };
        if new_region < region {
            return err(format!("entry for layer {} runs {} after a later region", e.layer, e.phase));
        }
        region = new_region;
        match new_region {
            0 => {
                if prev_fp.is_some_and(|p| e.layer <= p) {
                    return err(format!("fp entries out of layer order at layer {}", e.layer));
                }
                prev_fp = Some(e.layer);
            }
            1 => {
                if prev_bwd.is_some_and(|p| e.layer > p) {
                    return err(format!("backward entries out of reverse order at layer {}", e.layer));
                }
                prev_bwd = Some(e.layer);
            }
            _ => {}
        }
        let want_times = if e.phase == Phase::WuUpdate { 1 } else { net.batch_size as u64 };
        if e.times != want_times {
            return err(format!("layer {} {} runs {} times, want {want_times}", e.layer, e.phase, e.times));
        }
    }

    // Coverage: each key layer gets exactly the entries its kind demands.
    for l in &net.layers {
        let count = |p: Phase| plan.entries.iter().filter(|e| e.layer == l.index && e.phase == p).count();
        let want_bp = usize::from(l.is_mac_layer() && Some(l.index) != first_mac);
        let (fp, bp, wg, wu, up) = (
            count(Phase::Fp),
            count(Phase::Bp),
            count(Phase::WuGradient),
            count(Phase::WuUpdate),
            count(Phase::Upsample),
        );
        let want = if l.is_mac_layer() {
            (1, want_bp, 1, 1, 0)
        } else if l.kind == LayerKind::MaxPool {
            (1, 0, 0, 0, 1)
        } else {
            (0, 0, 0, 0, 0)
        };
        if (fp, bp, wg, wu, up) != want {
            return err(format!(
                "layer {} ({:?}) entry counts (fp,bp,wg,wu,up) = {:?}, want {:?}",
                l.index,
                l.kind,
                (fp, bp, wg, wu, up),
                want
            ));
        }
    }
    Ok(())
}

/// Builds the complete plan for one batch iteration.
pub fn compile(net: &NetworkSpec, hw: &HardwareConfig) -> Result<Plan> {
    validate_network(net)?;
    hw.validate(net)?;
    let tiles = resolve_tiles(net, hw)?;
    let buffers = BufferEstimate::compute(net, hw, tiles);
    if !buffers.fits() {
        return Err(Error::Infeasible(format!(
            "buffers need {} bits ({} input, {} weight, {} output, {} index, {} act-grad, {} weight-grad, {} old/new-weight), budget is {}; \
             shrink tiles or enable auto_tile",
            buffers.total_bits(),
            buffers.input_bits,
            buffers.weight_bits,
            buffers.output_bits,
            buffers.index_bits,
            buffers.act_grad_bits,
            buffers.weight_grad_bits,
            buffers.old_new_weight_bits,
            buffers.budget_bits
        )));
    }
    let entries = build_entries(net, hw, tiles);
    let plan = Plan {
        net: net.clone(),
        hw: hw.clone(),
        tiles,
        entries,
        buffers,
        mac_units: hw.mac_units(),
    };
    check_plan(&plan)?;
    Ok(plan)
}

#[derive(Serialize)]
struct PlanDoc<'a> {
    version: u32,
    network: NetDoc<'a>,
    hardware: &'a HardwareConfig,
    tiles: Tiles,
    resources: ResourceDoc,
}

#[derive(Serialize)]
struct NetDoc<'a> {
    name: &'a str,
    layers: usize,
    batch_size: usize,
    macs_per_image: u64,
}

#[derive(Serialize)]
struct ResourceDoc {
    mac_units: u64,
    fits_budget: bool,
    total_bits: u64,
    buffers: BufferEstimate,
    iteration_read_bytes: u64,
    iteration_write_bytes: u64,
    iteration_macs: u64,
}

/// The plan header as a deterministic structured document.
pub fn plan_toml(plan: &Plan) -> String {
    let doc = PlanDoc {
        version: 1,
        network: NetDoc {
            name: &plan.net.name,
            layers: plan.net.layers.len(),
            batch_size: plan.net.batch_size,
            macs_per_image: plan.net.image_macs(),
        },
        hardware: &plan.hw,
        tiles: plan.tiles,
        resources: ResourceDoc {
            mac_units: plan.mac_units,
            fits_budget: plan.buffers.fits(),
            total_bits: plan.buffers.total_bits(),
            buffers: plan.buffers,
            iteration_read_bytes: plan.iteration_bytes(Direction::Read),
            iteration_write_bytes: plan.iteration_bytes(Direction::Write),
            iteration_macs: plan.iteration_macs(),
        },
    };
    toml::to_string(&doc).expect("plan serialization cannot fail")
}

/// The schedule as a CSV table (CRLF line ends), one row per entry, bytes
/// per batch iteration.
pub fn schedule_csv(plan: &Plan) -> String {
    let mut s = String::from(
        "entry,layer,phase,times,tile_ox,tile_oy,tile_of,tile_if,tiles,trips,fill,logic_cycles,factor,macs,read_bytes,write_bytes\r\n",
    );
    for (i, e) in plan.entries.iter().enumerate() {
        s.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\r\n",
            e.layer,
            e.phase,
            e.times,
            e.tile_ox,
            e.tile_oy,
            e.tile_of,
            e.tile_if,
            e.tiles,
            e.trips,
            e.fill,
            e.logic_cycles(),
            e.factor,
            e.macs,
            e.iteration_bytes(Direction::Read),
            e.iteration_bytes(Direction::Write),
        ));
    }
    s
}

/// Writes `plan.toml` and `schedule.csv` into `dir`.
pub fn write_plan(plan: &Plan, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let toml_path = dir.join("plan.toml");
    std::fs::write(&toml_path, plan_toml(plan)).map_err(|e| Error::io(&toml_path, e))?;
    let csv_path = dir.join("schedule.csv");
    std::fs::write(&csv_path, schedule_csv(plan)).map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_network, NetworkBuilder};
    use crate::model::LossKind;

    fn hw_1x() -> HardwareConfig {
        HardwareConfig::builtin("1x").unwrap()
    }

    #[test]
    fn builtin_configs_hit_the_three_array_sizes() {
        for (name, want) in [("1x", 1024), ("2x", 2048), ("4x", 4096)] {
            let hw = HardwareConfig::builtin(name).unwrap();
            let net = builtin_network(&format!("cifar10_{name}")).unwrap();
            let plan = compile(&net, &hw).unwrap();
            assert_eq!(plan.mac_units, want);
        }
    }

    #[test]
    fn load_balance_factor_cases() {
        assert_eq!(load_balance_factor(8, 8, 3, 3, true), 4);
        assert_eq!(load_balance_factor(8, 8, 1, 1, true), 64);
        assert_eq!(load_balance_factor(8, 8, 3, 3, false), 1);
        assert_eq!(load_balance_factor(8, 8, 5, 5, true), 1);
        assert_eq!(load_balance_factor(8, 8, 9, 3, true), 1); // kernel overflows the array
        assert_eq!(load_balance_factor(4, 8, 3, 3, true), 2);
    }

    /// A 2-conv net whose second layer has nif divisible by the factor, so
    /// balanced trips divide exactly.
    fn two_conv_net() -> NetworkSpec {
        let mut b = NetworkBuilder::new("t", (8, 8, 3), 5, LossKind::Euclidean);
        b.conv(8, 3, 1, 1, true).unwrap();
        b.conv(8, 3, 1, 1, true).unwrap();
        b.flatten().unwrap();
        b.fc(5, false).unwrap();
        b.finish().unwrap()
    }

    #[test]
    fn wu_trips_shrink_exactly_by_the_factor() {
        let net = two_conv_net();
        let hw_on = HardwareConfig { pof: 8, tile_of: 8, ..HardwareConfig::default() };
        let hw_off = HardwareConfig { load_balancing: false, ..hw_on.clone() };
        let on = compile(&net, &hw_on).unwrap();
        let off = compile(&net, &hw_off).unwrap();
        let wu = |p: &Plan, layer: usize| {
            p.entries
                .iter()
                .find(|e| e.layer == layer && e.phase == Phase::WuGradient)
                .cloned()
                .unwrap()
        };
        // Layer 1: 3x3 kernels on an 8x8 array -> factor 4; nif = 8 divides.
        let (e_on, e_off) = (wu(&on, 1), wu(&off, 1));
        assert_eq!(e_on.factor, 4);
        assert_eq!(e_off.factor, 1);
        assert_eq!(e_on.trips * 4, e_off.trips);
        // Layer 0 has nif = 3: per-tile ceiling still honored.
        let (e0_on, e0_off) = (wu(&on, 0), wu(&off, 0));
        assert_eq!(e0_on.trips, e0_off.trips.div_ceil(4));
        // Traffic is identical either way: balancing changes cycles only.
        for dir in [Direction::Read, Direction::Write] {
            assert_eq!(e_on.iteration_bytes(dir), e_off.iteration_bytes(dir));
        }
    }

    #[test]
    fn traffic_is_independent_of_unroll() {
        // Same tile caps everywhere (caps must stay >= unroll, so size them
        // for the largest variant); only the array shape varies.
        let net = builtin_network("cifar10_1x").unwrap();
        let caps = HardwareConfig { tile_of: 64, ..hw_1x() };
        let base = compile(&net, &caps).unwrap();
        for (pox, poy, pof) in [(4, 4, 8), (8, 8, 32), (16, 4, 64), (8, 8, 64)] {
            let hw = HardwareConfig { pox, poy, pof, ..caps.clone() };
            let plan = compile(&net, &hw).unwrap();
            for dir in [Direction::Read, Direction::Write] {
                assert_eq!(
                    plan.iteration_bytes(dir),
                    base.iteration_bytes(dir),
                    "unroll {pox}x{poy}x{pof} changed {dir} bytes"
                );
            }
        }
    }

    #[test]
    fn wu_update_bytes_counted_by_hand() {
        let net = two_conv_net();
        let plan = compile(&net, &hw_1x()).unwrap();
        let fc = &net.layers[3];
        assert!(fc.kind == LayerKind::FullyConnected);
        let words = fc.kernel_words() as u64;
        let e = plan
            .entries
            .iter()
            .find(|e| e.layer == 3 && e.phase == Phase::WuUpdate)
            .unwrap();
        // Reads: gradient sum + previous step + old weights. Writes: new
        // weights + new step. All at 2 bytes per logical word, once per batch.
        assert_eq!(e.iteration_bytes(Direction::Read), 3 * 2 * words);
        assert_eq!(e.iteration_bytes(Direction::Write), 2 * 2 * words);
        assert_eq!(e.times, 1);
    }

    #[test]
    fn wu_gradient_traffic_matches_counting_oracle() {
        let net = builtin_network("cifar10_1x").unwrap();
        let hw = hw_1x();
        let plan = compile(&net, &hw).unwrap();
        let l = &net.layers[1]; // 16-filter conv over 32x32x16
        let e = plan
            .entries
            .iter()
            .find(|x| x.layer == 1 && x.phase == Phase::WuGradient)
            .unwrap();
        // Independent count, straight from the documented loop structure.
        let batch = net.batch_size as u64;
        let (mut rd, mut wr) = (0u64, 0u64);
        let seg = |n: usize, t: usize| segments(n, t);
        for &f in &seg(l.nof, hw.tile_of.min(l.nof)) {
            let sum = 2 * (l.nkx * l.nky * l.nif * f) as u64;
            rd += sum * (batch - 1); // read back skipped for the first image
            wr += sum * batch;
            for &ry in &seg(l.noy, hw.tile_oy.min(l.noy)) {
                for &rx in &seg(l.nox, hw.tile_ox.min(l.nox)) {
                    rd += 2 * (rx * ry * f) as u64 * batch; // gradient tiles
                    let a = ((rx - 1) + l.nkx).min(l.nix) * ((ry - 1) + l.nky).min(l.niy);
                    rd += 2 * a as u64 * l.nif as u64 * batch; // activations
                }
            }
        }
        assert_eq!(e.iteration_bytes(Direction::Read), rd);
        assert_eq!(e.iteration_bytes(Direction::Write), wr);
    }

    #[test]
    fn single_layer_net_has_the_minimal_schedule() {
        let mut b = NetworkBuilder::new("one", (1, 1, 3), 4, LossKind::Euclidean);
        b.conv(4, 1, 1, 0, false).unwrap();
        let net = b.finish().unwrap();
        let plan = compile(&net, &hw_1x()).unwrap();
        let phases: Vec<Phase> = plan.entries.iter().map(|e| e.phase).collect();
        // One FP, no data gradient (first layer), one WU pair.
        assert_eq!(phases, vec![Phase::Fp, Phase::WuGradient, Phase::WuUpdate]);
    }

    #[test]
    fn plans_serialize_deterministically() {
        let net = builtin_network("cifar10_1x").unwrap();
        let a = compile(&net, &hw_1x()).unwrap();
        let b = compile(&net, &hw_1x()).unwrap();
        assert_eq!(plan_toml(&a), plan_toml(&b));
        assert_eq!(schedule_csv(&a), schedule_csv(&b));
        assert!(schedule_csv(&a).ends_with("\r\n"));
        assert!(plan_toml(&a).contains("mac_units = 1024"));
    }

    #[test]
    fn builtin_plan_covers_every_layer_with_the_right_cadence() {
        let net = builtin_network("cifar10_1x").unwrap();
        let plan = compile(&net, &hw_1x()).unwrap();
        let count = |p: Phase| plan.entries.iter().filter(|e| e.phase == p).count();
        // 6 convs + 1 fc + 3 pools forward; backward skips the first conv.
        assert_eq!(count(Phase::Fp), 10);
        assert_eq!(count(Phase::Bp), 6);
        assert_eq!(count(Phase::Upsample), 3);
        assert_eq!(count(Phase::WuGradient), 7);
        assert_eq!(count(Phase::WuUpdate), 7);
        assert!(plan
            .entries
            .iter()
            .all(|e| e.times == if e.phase == Phase::WuUpdate { 1 } else { 40 }));
        // Mutating the order must trip the checker.
        let mut bad = plan.clone();
        bad.entries.swap(0, 1);
        assert!(check_plan(&bad).is_err());
    }

    #[test]
    fn pool_index_bits_match_the_window_code() {
        // 16x16x16 input tile, k = 2: 8*8*16 pooled indices at 2 bits each.
        let mut b = NetworkBuilder::new("p", (16, 16, 16), 10, LossKind::Euclidean);
        b.maxpool(2).unwrap();
        b.flatten().unwrap();
        b.fc(10, false).unwrap();
        let net = b.finish().unwrap();
        let hw = HardwareConfig { double_buffering: false, ..hw_1x() };
        let plan = compile(&net, &hw).unwrap();
        assert_eq!(plan.buffers.index_bits, 2 * (8 * 8 * 16));
        // Double buffering doubles every tile-resident class, not weights.
        let db = compile(&net, &hw_1x()).unwrap();
        assert_eq!(db.buffers.index_bits, 2 * plan.buffers.index_bits);
        assert_eq!(db.buffers.input_bits, 2 * plan.buffers.input_bits);
        assert_eq!(db.buffers.output_bits, 2 * plan.buffers.output_bits);
        assert_eq!(db.buffers.weight_bits, plan.buffers.weight_bits);
        assert_eq!(db.buffers.old_new_weight_bits, plan.buffers.old_new_weight_bits);
    }

    #[test]
    fn weight_buffer_sized_by_the_largest_layer() {
        let net = builtin_network("cifar10_1x").unwrap();
        let plan = compile(&net, &hw_1x()).unwrap();
        // Largest kernels: 64 filters x 64 channels x 3x3 taps, 16-bit words;
        // 64 and 64 are multiples of pof = 16 so padding adds nothing.
        assert_eq!(plan.buffers.weight_bits, 64 * 64 * 9 * 16);
        assert_eq!(plan.buffers.old_new_weight_bits, 2 * 64 * 64 * 9 * 16);
    }

    #[test]
    fn over_budget_is_infeasible_with_exit_code_3() {
        let net = builtin_network("cifar10_1x").unwrap();
        let hw = HardwareConfig { buffer_budget_bits: 1000, ..hw_1x() };
        let err = compile(&net, &hw).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("budget"));
    }

    #[test]
    fn auto_tile_shrinks_until_the_budget_fits() {
        let net = builtin_network("cifar10_1x").unwrap();
        // Weight-side classes alone need ~1.8 Mbit and the floor across all
        // classes is ~2.3 Mbit; leave tight tile room above that.
        let budget = 2_400_000;
        let frozen = HardwareConfig { buffer_budget_bits: budget, tile_ox: 32, tile_oy: 32, tile_of: 64, tile_if: 64, ..hw_1x() };
        assert!(compile(&net, &frozen).is_err(), "fixed large tiles should bust this budget");
        let auto = HardwareConfig { auto_tile: true, ..frozen.clone() };
        let plan = compile(&net, &auto).unwrap();
        assert!(plan.buffers.fits());
        assert!(plan.tiles.r#if < 64 || plan.tiles.ox < 32 || plan.tiles.oy < 32);
        // Determinism of the search.
        let again = compile(&net, &auto).unwrap();
        assert_eq!(plan.tiles, again.tiles);
        // An impossible budget still fails cleanly.
        let hopeless = HardwareConfig { auto_tile: true, buffer_budget_bits: 1000, ..hw_1x() };
        assert_eq!(compile(&net, &hopeless).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn mac_roles_follow_the_reuse_table() {
        assert_eq!(
            mac_roles(Phase::Fp).unwrap(),
            ["activations", "weights", "activations"]
        );
        assert_eq!(
            mac_roles(Phase::Bp).unwrap(),
            ["local_gradients", "flipped_weights", "local_gradients"]
        );
        assert_eq!(
            mac_roles(Phase::WuGradient).unwrap(),
            ["activations", "local_gradients", "weight_gradients"]
        );
        assert!(mac_roles(Phase::WuUpdate).is_none());
        assert!(mac_roles(Phase::Upsample).is_none());
    }

    #[test]
    fn fp_trips_match_hand_arithmetic_on_the_first_conv() {
        // 32x32x3 -> 16 filters, 3x3, tiles 16: four 16x16 tiles, one filter
        // tile, one channel tile. Per tile: 9 taps * 3 channels * 1 * 2 * 2.
        let net = builtin_network("cifar10_1x").unwrap();
        let plan = compile(&net, &hw_1x()).unwrap();
        let e = plan.entries.iter().find(|e| e.layer == 0 && e.phase == Phase::Fp).unwrap();
        assert_eq!(e.tiles, 4);
        assert_eq!(e.trips, 4 * (9 * 3 * 2 * 2));
        assert_eq!(e.fill, 4 * 16);
        assert_eq!(e.macs, 32 * 32 * 16 * 9 * 3);
    }
}
