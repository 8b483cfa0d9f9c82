//! Configuration file grammar.
//!
//! One TOML document describes a run:
//!
//! ```toml
//! seed = 42
//!
//! [network]                     # one of: builtin | description | [[network.layer]]
//! builtin = "cifar10_1x"        # cifar10_1x / cifar10_2x / cifar10_4x
//! # description = "16C3-16C3-P-32C3-32C3-P-64C3-64C3-P-FC"
//! # input = [32, 32, 3]
//! # num_classes = 10
//! # loss = "euclidean"          # or "square_hinge"
//!
//! [training]
//! batch_size = 40
//! learning_rate = 0.002
//! momentum = 0.9
//! epochs = 1
//!
//! [formats]
//! weights = "q2.14"
//! activations = "q8.8"
//! gradients = "q8.8"
//! weight_gradients = "q2.14"
//! scalars = "q1.15"
//! rounding = "nearest_even"     # or "stochastic"
//! rounding_seed = 0
//!
//! [hardware]                    # every field optional, defaults shown in README
//! pox = 8
//! poy = 8
//! pof = 16
//! tile_ox = 16
//! tile_oy = 16
//! tile_of = 16
//! tile_if = 16
//!
//! [dataset]
//! source = "synthetic:42:640"   # or "cifar10:/path/to/binaries"
//! train_limit = 2000
//! test_limit = 1000
//! ```
//!
//! Explicit layer lists replace `builtin`/`description`:
//!
//! ```toml
//! [network]
//! input = [8, 8, 3]
//! num_classes = 4
//! loss = "square_hinge"
//! [[network.layer]]
//! kind = "conv"
//! nof = 8
//! k = 3          # stride, pad, relu optional (1, k/2, true)
//! [[network.layer]]
//! kind = "maxpool"
//! k = 2
//! [[network.layer]]
//! kind = "fc"    # flatten is inserted automatically if needed
//! ```
//!
//! `--set a.b.c=value` overrides apply to the parsed document before
//! validation.

use super::*;
use crate::fxp::{QFormat, Rounding};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Fully resolved run description.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub net: NetworkSpec,
    pub hw: HardwareConfig,
    pub formats: FormatConfig,
    pub dataset: DatasetConfig,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    network: RawNetwork,
    #[serde(default)]
    training: RawTraining,
    #[serde(default)]
    formats: RawFormats,
    #[serde(default)]
    hardware: HardwareConfig,
    #[serde(default)]
    dataset: RawDataset,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawNetwork {
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    builtin: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<LossKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layer: Option<Vec<RawLayer>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    nof: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    relu: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawTraining {
    batch_size: usize,
    learning_rate: f64,
    momentum: f64,
    epochs: usize,
}

impl Default for RawTraining {
    fn default() -> Self {
        RawTraining { batch_size: 40, learning_rate: 0.002, momentum: 0.9, epochs: 1 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawFormats {
    weights: QFormat,
    activations: QFormat,
    gradients: QFormat,
    weight_gradients: QFormat,
    scalars: QFormat,
    rounding: String,
    rounding_seed: u64,
}

impl Default for RawFormats {
    fn default() -> Self {
        let d = FormatConfig::default();
        RawFormats {
            weights: d.weights,
            activations: d.activations,
            gradients: d.gradients,
            weight_gradients: d.weight_gradients,
            scalars: d.scalars,
            rounding: "nearest_even".into(),
            rounding_seed: 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawDataset {
    source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_limit: Option<usize>,
}

impl Default for RawDataset {
    fn default() -> Self {
        RawDataset { source: "synthetic:42:640".into(), train_limit: None, test_limit: None }
    }
}

fn toml_error(text: &str, e: toml::de::Error) -> Error {
    let loc = e
        .span()
        .map(|s| {
            let upto = &text[..s.start.min(text.len())];
            let line = upto.matches('\n').count() + 1;
            let col = s.start - upto.rfind('\n').map(|p| p + 1).unwrap_or(0) + 1;
            format!(" at line {line}, column {col}")
        })
        .unwrap_or_default();
    Error::Config(format!("{}{loc}", e.message()))
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<Config> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    resolve(raw)
}

fn resolve(raw: RawConfig) -> Result<Config> {
    let n = &raw.network;
    let loss = n.loss.unwrap_or(LossKind::Euclidean);
    let mut net = if let Some(b) = &n.builtin {
        let mut net = builtin_network(b)?;
        if let Some(l) = n.loss {
            net.loss = l;
        }
        net
    } else if let Some(desc) = &n.description {
        let input = n.input.ok_or_else(|| Error::Config("network.input required".into()))?;
        let classes =
            n.num_classes.ok_or_else(|| Error::Config("network.num_classes required".into()))?;
        let name = n.name.clone().unwrap_or_else(|| "custom".into());
        parse_description(&name, desc, (input[0], input[1], input[2]), classes, loss)?
    } else if let Some(layers) = &n.layer {
        let input = n.input.ok_or_else(|| Error::Config("network.input required".into()))?;
        let classes =
            n.num_classes.ok_or_else(|| Error::Config("network.num_classes required".into()))?;
        let name = n.name.clone().unwrap_or_else(|| "custom".into());
        build_explicit(&name, layers, (input[0], input[1], input[2]), classes, loss)?
    } else {
        return Err(Error::Config(
            "network needs one of: builtin, description, or [[network.layer]]".into(),
        ));
    };

    net.batch_size = raw.training.batch_size;
    net.learning_rate = raw.training.learning_rate;
    net.momentum = raw.training.momentum;
    net.epochs = raw.training.epochs;
    validate_network(&net)?;

    let rounding = match raw.formats.rounding.as_str() {
        "nearest_even" => Rounding::NearestEven,
        "stochastic" => Rounding::Stochastic { seed: raw.formats.rounding_seed },
        other => return Err(Error::Config(format!("formats.rounding: unknown mode {other:?}"))),
    };
    let formats = FormatConfig {
        weights: raw.formats.weights,
        activations: raw.formats.activations,
        gradients: raw.formats.gradients,
        weight_gradients: raw.formats.weight_gradients,
        scalars: raw.formats.scalars,
        rounding,
    };

    let hw = raw.hardware;
    if !hw.auto_tile {
        hw.validate(&net)?;
    }

    let mut dataset = DatasetConfig::parse_shorthand(&raw.dataset.source)?;
    dataset.train_limit = raw.dataset.train_limit;
    dataset.test_limit = raw.dataset.test_limit;

    Ok(Config { seed: raw.seed.unwrap_or(42), net, hw, formats, dataset })
}

fn build_explicit(
    name: &str,
    layers: &[RawLayer],
    input: (usize, usize, usize),
    num_classes: usize,
    loss: LossKind,
) -> Result<NetworkSpec> {
    let mut b = NetworkBuilder::new(name, input, num_classes, loss);
    for l in layers {
        match l.kind.as_str() {
            "conv" => {
                let nof = l
                    .nof
                    .ok_or_else(|| Error::Config("conv layer needs nof".into()))?;
                let k = l.k.ok_or_else(|| Error::Config("conv layer needs k".into()))?;
                b.conv(nof, k, l.stride.unwrap_or(1), l.pad.unwrap_or(k / 2), l.relu.unwrap_or(true))?;
            }
            "maxpool" => {
                b.maxpool(l.k.ok_or_else(|| Error::Config("maxpool layer needs k".into()))?)?;
            }
            "flatten" => {
                b.flatten()?;
            }
            "fc" => {
                if b.cur_shape().0 != 1 || b.cur_shape().1 != 1 {
                    b.flatten()?;
                }
                b.fc(l.nof.unwrap_or(num_classes), l.relu.unwrap_or(true))?;
            }
            other => return Err(Error::Config(format!("unknown layer kind {other:?}"))),
        }
    }
    b.finish()
}

/// Applies `key=value` overrides to a TOML document, creating intermediate
/// tables as needed. Values parse as TOML literals with a string fallback.
pub fn apply_overrides(text: &str, sets: &[String]) -> Result<String> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| toml_error(text, e))?;
    for s in sets {
        let (key, val) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override key {key:?} is malformed")));
        }
        let mut cur = &mut table;
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override key {key:?} crosses a non-table")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), parse_literal(val.trim()));
    }
    toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
}

fn parse_literal(v: &str) -> toml::Value {
    if let Ok(b) = v.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = v.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = v.parse::<f64>() {
        return toml::Value::Float(f);
    }
    // Arrays and quoted strings parse as a one-entry document.
    if let Ok(mut t) = format!("x = {v}").parse::<toml::Table>() {
        if let Some(val) = t.remove("x") {
            return val;
        }
    }
    toml::Value::String(v.trim_matches('"').to_string())
}

/// Serializes a resolved config back to the file grammar (explicit layer
/// list). `parse_config(serialize_config(c))` reproduces `c` exactly.
pub fn serialize_config(c: &Config) -> String {
    let layers: Vec<RawLayer> = c
        .net
        .layers
        .iter()
        .filter(|l| l.kind != LayerKind::Loss)
        .map(|l| match l.kind {
            LayerKind::Conv => RawLayer {
                kind: "conv".into(),
                nof: Some(l.nof),
                k: Some(l.nkx),
                stride: Some(l.stride),
                pad: Some(l.pad),
                relu: Some(l.relu),
            },
            LayerKind::MaxPool => RawLayer {
                kind: "maxpool".into(),
                nof: None,
                k: Some(l.nkx),
                stride: None,
                pad: None,
                relu: None,
            },
            LayerKind::Flatten => RawLayer {
                kind: "flatten".into(),
                nof: None,
                k: None,
                stride: None,
                pad: None,
                relu: None,
            },
            LayerKind::FullyConnected => RawLayer {
                kind: "fc".into(),
                nof: Some(l.nof),
                k: None,
                stride: None,
                pad: None,
                relu: Some(l.relu),
            },
            LayerKind::Loss => unreachable!(),
        })
        .collect();

    let (rounding, rounding_seed) = match c.formats.rounding {
        Rounding::NearestEven => ("nearest_even".to_string(), 0),
        Rounding::Stochastic { seed } => ("stochastic".to_string(), seed),
    };
    let source = match &c.dataset.source {
        DatasetSource::Cifar10 { path } => format!("cifar10:{}", path.display()),
        DatasetSource::Synthetic { seed, count } => format!("synthetic:{seed}:{count}"),
    };

    let raw = RawConfig {
        seed: Some(c.seed),
        network: RawNetwork {
            name: Some(c.net.name.clone()),
            builtin: None,
            description: None,
            input: Some([c.net.input.0, c.net.input.1, c.net.input.2]),
            num_classes: Some(c.net.num_classes),
            loss: Some(c.net.loss),
            layer: Some(layers),
        },
        training: RawTraining {
            batch_size: c.net.batch_size,
            learning_rate: c.net.learning_rate,
            momentum: c.net.momentum,
            epochs: c.net.epochs,
        },
        formats: RawFormats {
            weights: c.formats.weights,
            activations: c.formats.activations,
            gradients: c.formats.gradients,
            weight_gradients: c.formats.weight_gradients,
            scalars: c.formats.scalars,
            rounding,
            rounding_seed,
        },
        hardware: c.hw.clone(),
        dataset: RawDataset {
            source,
            train_limit: c.dataset.train_limit,
            test_limit: c.dataset.test_limit,
        },
    };
    toml::to_string_pretty(&raw).expect("config serialization cannot fail")
}

impl NetworkBuilder {
    fn cur_shape(&self) -> (usize, usize, usize) {
        self.cur
    }
}
