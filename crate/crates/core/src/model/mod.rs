//! Network, hardware, and dataset descriptions.
//!
//! A network is an ordered list of [`LayerSpec`]s with fully resolved
//! extents; construction propagates shapes and rejects inconsistent
//! structures with errors that name the offending layer and field.
//! ReLU is an affiliated attribute of Conv/FC layers (not a standalone
//! layer), Flatten is shape-only, and the final layer is always a Loss.

mod config;
mod dataset;

pub use config::{apply_overrides, parse_config, serialize_config, Config};
pub use dataset::{load_dataset, write_cifar_binary, Dataset, Split};

use crate::fxp::{QFormat, Rounding};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    MaxPool,
    Flatten,
    FullyConnected,
    Loss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Square hinge on raw scores with +-1 targets.
    SquareHinge,
    /// Half squared distance to the one-hot target.
    Euclidean,
}

/// One layer with all extents resolved. Unused fields are zero/false for the
/// kinds that do not need them (e.g. `nkx` for MaxPool is the pool window).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    /// Input extents.
    pub nix: usize,
    pub niy: usize,
    pub nif: usize,
    /// Output extents.
    pub nox: usize,
    pub noy: usize,
    pub nof: usize,
    /// Kernel extents (Conv/FC) or pool window (MaxPool, nkx == nky == k).
    pub nkx: usize,
    pub nky: usize,
    pub stride: usize,
    pub pad: usize,
    /// Affiliated ReLU on the layer output (Conv and FC).
    pub relu: bool,
}

impl LayerSpec {
    pub fn is_mac_layer(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::FullyConnected)
    }

    /// Kernel words (weights) held by this layer.
    pub fn kernel_words(&self) -> usize {
        if self.is_mac_layer() {
            self.nkx * self.nky * self.nif * self.nof
        } else {
            0
        }
    }

    /// Ideal multiply count for one forward pass of this layer.
    pub fn fp_macs(&self) -> u64 {
        if self.is_mac_layer() {
            (self.nox * self.noy * self.nof * self.nkx * self.nky * self.nif) as u64
        } else {
            0
        }
    }
}

/// Number formats for each tensor class plus the rounding rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormatConfig {
    pub weights: QFormat,
    pub activations: QFormat,
    /// Local gradients (loss and backpropagated activation gradients).
    pub gradients: QFormat,
    pub weight_gradients: QFormat,
    /// Learning-rate / momentum / reciprocal-batch scalars.
    pub scalars: QFormat,
    pub rounding: Rounding,
}

impl Default for FormatConfig {
    fn default() -> Self {
        FormatConfig {
            weights: QFormat::Q2_14,
            activations: QFormat::Q8_8,
            gradients: QFormat::Q8_8,
            weight_gradients: QFormat::Q2_14,
            scalars: QFormat::Q0_15,
            rounding: Rounding::NearestEven,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Input extents (x, y, channels).
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub loss: LossKind,
    pub layers: Vec<LayerSpec>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
}

impl NetworkSpec {
    pub fn conv_fc_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_mac_layer())
    }

    pub fn max_nox(&self) -> usize {
        self.layers.iter().filter(|l| l.is_mac_layer()).map(|l| l.nox).max().unwrap_or(1)
    }

    pub fn max_noy(&self) -> usize {
        self.layers.iter().filter(|l| l.is_mac_layer()).map(|l| l.noy).max().unwrap_or(1)
    }

    pub fn max_nof(&self) -> usize {
        self.layers.iter().filter(|l| l.is_mac_layer()).map(|l| l.nof).max().unwrap_or(1)
    }

    /// Largest per-layer kernel storage in words.
    pub fn max_kernel_words(&self) -> usize {
        self.layers.iter().map(|l| l.kernel_words()).max().unwrap_or(0)
    }

    /// Ideal multiply count for one image: forward, backward and weight
    /// gradient convolutions (pool/ReLU/upsample excluded). The backward
    /// count covers every Conv/FC except the first layer, whose data
    /// gradient is not scheduled.
    pub fn image_macs(&self) -> u64 {
        let mut total = 0u64;
        let first_mac = self.layers.iter().position(|l| l.is_mac_layer());
        for l in &self.layers {
            if !l.is_mac_layer() {
                continue;
            }
            let fp = l.fp_macs();
            total += 2 * fp; // forward + weight gradient have the same count
            if Some(l.index) != first_mac {
                total += fp; // backward data gradient
            }
        }
        total
    }
}

/// Builder used by the description parser and the config reader: propagates
/// shapes layer by layer and validates as it goes.
#[derive(Debug)]
pub struct NetworkBuilder {
    name: String,
    input: (usize, usize, usize),
    num_classes: usize,
    loss: LossKind,
    layers: Vec<LayerSpec>,
    cur: (usize, usize, usize),
}

impl NetworkBuilder {
    pub fn new(
        name: &str,
        input: (usize, usize, usize),
        num_classes: usize,
        loss: LossKind,
    ) -> NetworkBuilder {
        NetworkBuilder {
            name: name.to_string(),
            input,
            num_classes,
            loss,
            layers: Vec::new(),
            cur: input,
        }
    }

    fn err(&self, field: &str, msg: String) -> Error {
        Error::Config(format!("layer {} field {field}: {msg}", self.layers.len()))
    }

    pub fn conv(&mut self, nof: usize, k: usize, stride: usize, pad: usize, relu: bool) -> Result<&mut Self> {
        let (nix, niy, nif) = self.cur;
        if nof == 0 || k == 0 || stride == 0 {
            return Err(self.err("nof/k/stride", "must be >= 1".into()));
        }
        let span_x = nix + 2 * pad;
        let span_y = niy + 2 * pad;
        if span_x < k
            || span_y < k
            || !(span_x - k).is_multiple_of(stride)
            || !(span_y - k).is_multiple_of(stride)
        {
            return Err(self.err(
                "kernel",
                format!("kernel {k} stride {stride} pad {pad} does not cover input {nix}x{niy}"),
            ));
        }
        let nox = (span_x - k) / stride + 1;
        let noy = (span_y - k) / stride + 1;
        self.layers.push(LayerSpec {
            index: self.layers.len(),
            kind: LayerKind::Conv,
            nix,
            niy,
            nif,
            nox,
            noy,
            nof,
            nkx: k,
            nky: k,
            stride,
            pad,
            relu,
        });
        self.cur = (nox, noy, nof);
        Ok(self)
    }

    pub fn maxpool(&mut self, k: usize) -> Result<&mut Self> {
        let (nix, niy, nif) = self.cur;
        if k < 2 {
            return Err(self.err("k", "pool window must be >= 2".into()));
        }
        if nix % k != 0 || niy % k != 0 {
            return Err(self.err(
                "k",
                format!("pool window {k} does not divide input extent {nix}x{niy}"),
            ));
        }
        self.layers.push(LayerSpec {
            index: self.layers.len(),
            kind: LayerKind::MaxPool,
            nix,
            niy,
            nif,
            nox: nix / k,
            noy: niy / k,
            nof: nif,
            nkx: k,
            nky: k,
            stride: k,
            pad: 0,
            relu: false,
        });
        self.cur = (nix / k, niy / k, nif);
        Ok(self)
    }

    pub fn flatten(&mut self) -> Result<&mut Self> {
        let (nix, niy, nif) = self.cur;
        let n = nix * niy * nif;
        self.layers.push(LayerSpec {
            index: self.layers.len(),
            kind: LayerKind::Flatten,
            nix,
            niy,
            nif,
            nox: 1,
            noy: 1,
            nof: n,
            nkx: 0,
            nky: 0,
            stride: 0,
            pad: 0,
            relu: false,
        });
        self.cur = (1, 1, n);
        Ok(self)
    }

    /// Fully connected layer, modeled as a convolution whose kernel spans the
    /// whole input map. ReLU is affiliated like on Conv layers.
    pub fn fc(&mut self, nof: usize, relu: bool) -> Result<&mut Self> {
        let (nix, niy, nif) = self.cur;
        self.layers.push(LayerSpec {
            index: self.layers.len(),
            kind: LayerKind::FullyConnected,
            nix,
            niy,
            nif,
            nox: 1,
            noy: 1,
            nof,
            nkx: nix,
            nky: niy,
            stride: 1,
            pad: 0,
            relu,
        });
        self.cur = (1, 1, nof);
        Ok(self)
    }

    pub fn finish(mut self) -> Result<NetworkSpec> {
        let (x, y, c) = self.cur;
        if (x, y, c) != (1, 1, self.num_classes) {
            return Err(Error::Config(format!(
                "network must end in {} scores before the loss, got {x}x{y}x{c}",
                self.num_classes
            )));
        }
        self.layers.push(LayerSpec {
            index: self.layers.len(),
            kind: LayerKind::Loss,
            nix: 1,
            niy: 1,
            nif: self.num_classes,
            nox: 1,
            noy: 1,
            nof: self.num_classes,
            nkx: 0,
            nky: 0,
            stride: 0,
            pad: 0,
            relu: false,
        });
        Ok(NetworkSpec {
            name: self.name,
            input: self.input,
            num_classes: self.num_classes,
            loss: self.loss,
            layers: self.layers,
            batch_size: 40,
            learning_rate: 0.002,
            momentum: 0.9,
            epochs: 1,
        })
    }
}

/// Parses the compact topology notation, e.g.
/// `"16C3-16C3-P-32C3-32C3-P-64C3-64C3-P-FC"`: `<n>C<k>` is a same-padded
/// stride-1 convolution with n filters and affiliated ReLU, `P` a 2x2
/// max-pool, and `FC` flatten plus the classifier (with affiliated ReLU).
pub fn parse_description(
    name: &str,
    desc: &str,
    input: (usize, usize, usize),
    num_classes: usize,
    loss: LossKind,
) -> Result<NetworkSpec> {
    let mut b = NetworkBuilder::new(name, input, num_classes, loss);
    for tok in desc.split('-') {
        let tok = tok.trim();
        if tok == "P" {
            b.maxpool(2)?;
        } else if tok == "FC" {
            b.flatten()?;
            b.fc(num_classes, true)?;
        } else if let Some((n, k)) = tok.split_once('C') {
            let n: usize = n
                .parse()
                .map_err(|_| Error::Config(format!("bad filter count in token {tok:?}")))?;
            let k: usize = k
                .parse()
                .map_err(|_| Error::Config(format!("bad kernel size in token {tok:?}")))?;
            b.conv(n, k, 1, k / 2, true)?;
        } else {
            return Err(Error::Config(format!("unknown topology token {tok:?}")));
        }
    }
    b.finish()
}

/// Built-in CIFAR-10 classifiers at three widths. `scale` multiplies the
/// conv depths: 1x is 16/16/32/32/64/64.
pub fn builtin_network(name: &str) -> Result<NetworkSpec> {
    let scale = match name {
        "cifar10_1x" => 1,
        "cifar10_2x" => 2,
        "cifar10_4x" => 4,
        _ => {
            return Err(Error::Config(format!(
                "unknown builtin network {name:?} (cifar10_1x/2x/4x)"
            )))
        }
    };
    let d = |w: usize| w * scale;
    let desc = format!(
        "{}C3-{}C3-P-{}C3-{}C3-P-{}C3-{}C3-P-FC",
        d(16),
        d(16),
        d(32),
        d(32),
        d(64),
        d(64)
    );
    parse_description(name, &desc, (32, 32, 3), 10, LossKind::Euclidean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConfig {
    /// MAC array unroll: output columns, rows, filters.
    pub pox: usize,
    pub poy: usize,
    pub pof: usize,
    /// Accepted for completeness; scheduling requires them to be 1.
    pub pkx: usize,
    pub pky: usize,
    pub pix: usize,
    pub piy: usize,
    pub pif: usize,
    /// Tile extents in the output space plus the input-channel tile.
    pub tile_ox: usize,
    pub tile_oy: usize,
    pub tile_of: usize,
    pub tile_if: usize,
    /// When set, the planner picks tile sizes itself (greedy, largest
    /// tile_of then tile_oy that fits the buffer budget).
    pub auto_tile: bool,
    pub clock_hz: f64,
    pub dram_bandwidth_bits_per_s: f64,
    /// Fixed setup cost charged per DRAM burst.
    pub dram_setup_cycles: u64,
    pub buffer_budget_bits: u64,
    pub double_buffering: bool,
    pub load_balancing: bool,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        HardwareConfig {
            pox: 8,
            poy: 8,
            pof: 16,
            pkx: 1,
            pky: 1,
            pix: 1,
            piy: 1,
            pif: 1,
            tile_ox: 16,
            tile_oy: 16,
            tile_of: 16,
            tile_if: 16,
            auto_tile: false,
            clock_hz: 240e6,
            dram_bandwidth_bits_per_s: 16.9e9,
            dram_setup_cycles: 30,
            buffer_budget_bits: 240_000_000,
            double_buffering: true,
            load_balancing: true,
        }
    }
}

impl HardwareConfig {
    /// Built-in array sizes matching the three reference design points:
    /// 8x8x16, 8x8x32, 8x8x64.
    pub fn builtin(name: &str) -> Result<HardwareConfig> {
        let pof = match name {
            "1x" | "cifar10_1x" => 16,
            "2x" | "cifar10_2x" => 32,
            "4x" | "cifar10_4x" => 64,
            _ => return Err(Error::Config(format!("unknown builtin hardware {name:?}"))),
        };
        Ok(HardwareConfig { pof, tile_of: pof, ..HardwareConfig::default() })
    }

    pub fn mac_units(&self) -> u64 {
        (self.pox * self.poy * self.pof) as u64
    }

    /// Validates the standalone fields plus the tile/unroll relations that
    /// depend on the network. Call after any auto-tiling has resolved.
    pub fn validate(&self, net: &NetworkSpec) -> Result<()> {
        let e = |f: &str, m: String| Err(Error::Config(format!("hardware.{f}: {m}")));
        if self.pox == 0 || self.poy == 0 || self.pof == 0 {
            return e("pox/poy/pof", "unroll factors must be >= 1".into());
        }
        for (name, v) in
            [("pkx", self.pkx), ("pky", self.pky), ("pix", self.pix), ("piy", self.piy), ("pif", self.pif)]
        {
            if v != 1 {
                return e(name, format!("fixed at 1 in this architecture, got {v}"));
            }
        }
        if !self.clock_hz.is_finite() || self.clock_hz <= 0.0 {
            return e("clock_hz", "must be positive".into());
        }
        if !self.dram_bandwidth_bits_per_s.is_finite() || self.dram_bandwidth_bits_per_s <= 0.0 {
            return e("dram_bandwidth_bits_per_s", "must be positive".into());
        }
        if self.buffer_budget_bits == 0 {
            return e("buffer_budget_bits", "must be positive".into());
        }
        if self.tile_if == 0 {
            return e("tile_if", "must be >= 1".into());
        }
        // Tiles are upper bounds: layers smaller than the tile simply use
        // their own extent. A tile below its unroll can never be scheduled.
        let checks = [
            ("tile_ox", self.tile_ox, self.pox),
            ("tile_oy", self.tile_oy, self.poy),
            ("tile_of", self.tile_of, self.pof),
        ];
        for (name, tile, unroll) in checks {
            if tile < unroll {
                return e(name, format!("tile {tile} smaller than unroll {unroll}"));
            }
        }
        let _ = net;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Directory with CIFAR-10 binary files (`data_batch_*.bin`,
    /// `test_batch.bin`) or a single `.bin` file.
    Cifar10 { path: PathBuf },
    /// Deterministic generated 10-class image set in CIFAR-10 geometry.
    Synthetic { seed: u64, count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Cap on images taken from the train split.
    pub train_limit: Option<usize>,
    /// Cap on images taken from the test split.
    pub test_limit: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic { seed: 42, count: 640 },
            train_limit: None,
            test_limit: None,
        }
    }
}

impl DatasetConfig {
    /// Parses the CLI shorthand `cifar10:PATH` / `synthetic:SEED:COUNT`.
    pub fn parse_shorthand(s: &str) -> Result<DatasetConfig> {
        let bad = || Error::Config(format!("bad dataset spec {s:?}"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let source = match kind {
            "cifar10" => DatasetSource::Cifar10 { path: PathBuf::from(rest) },
            "synthetic" => {
                let (seed, count) = rest.split_once(':').ok_or_else(bad)?;
                DatasetSource::Synthetic {
                    seed: seed.parse().map_err(|_| bad())?,
                    count: count.parse().map_err(|_| bad())?,
                }
            }
            _ => return Err(bad()),
        };
        Ok(DatasetConfig { source, train_limit: None, test_limit: None })
    }
}

/// Validates network-level training hyperparameters and structure.
pub fn validate_network(net: &NetworkSpec) -> Result<()> {
    if net.layers.is_empty() {
        return Err(Error::Config("network has no layers".into()));
    }
    let last = net.layers.len() - 1;
    for (i, l) in net.layers.iter().enumerate() {
        if l.index != i {
            return Err(Error::Config(format!("layer {i}: index field {} out of order", l.index)));
        }
        match l.kind {
            LayerKind::Loss if i != last => {
                return Err(Error::Config(format!("layer {i}: loss must be the final layer")));
            }
            _ => {}
        }
        if i > 0 {
            let p = &net.layers[i - 1];
            if (l.nix, l.niy, l.nif) != (p.nox, p.noy, p.nof) {
                return Err(Error::Config(format!(
                    "layer {i}: input {}x{}x{} does not match layer {} output {}x{}x{}",
                    l.nix,
                    l.niy,
                    l.nif,
                    i - 1,
                    p.nox,
                    p.noy,
                    p.nof
                )));
            }
        }
    }
    if net.layers[last].kind != LayerKind::Loss {
        return Err(Error::Config("network must end with a loss layer".into()));
    }
    if net.layers[..last].iter().any(|l| l.kind == LayerKind::Loss) {
        return Err(Error::Config("multiple loss layers".into()));
    }
    if net.input != (net.layers[0].nix, net.layers[0].niy, net.layers[0].nif) {
        return Err(Error::Config("network.input does not match first layer".into()));
    }
    if net.num_classes < 2 {
        return Err(Error::Config("num_classes must be >= 2".into()));
    }
    if net.batch_size == 0 {
        return Err(Error::Config("training.batch_size must be >= 1".into()));
    }
    // Zero is allowed: a frozen-weight run is a useful diagnostic.
    if !net.learning_rate.is_finite() || net.learning_rate < 0.0 {
        return Err(Error::Config("training.learning_rate must be finite and >= 0".into()));
    }
    if !(0.0..1.0).contains(&net.momentum) {
        return Err(Error::Config("training.momentum must be in [0, 1)".into()));
    }
    if net.epochs == 0 {
        return Err(Error::Config("training.epochs must be >= 1".into()));
    }
    Ok(())
}
