//! Shared helpers for the integration suites: bounded random networks and
//! hardware shapes, random fixed-point images, a state comparator, and a
//! float (f64) reference engine used for calculus checks of the gradient
//! formulas, structured loop-for-loop like the fixed-point engine but free
//! of quantization.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracc::fxp::QFormat;
use tracc::golden::{FxpTensor, TrainState};
use tracc::model::{
    Config, DatasetConfig, FormatConfig, HardwareConfig, LayerKind, LayerSpec, LossKind,
    NetworkBuilder, NetworkSpec,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random network of at most four key layers (conv / pool / fc) with every
/// extent at most 16. Invalid draws (kernel not covering the input, pool not
/// dividing it) are resampled.
pub fn random_net(r: &mut ChaCha8Rng, tag: usize) -> NetworkSpec {
    loop {
        if let Ok(net) = try_random_net(r, tag) {
            return net;
        }
    }
}

fn try_random_net(r: &mut ChaCha8Rng, tag: usize) -> tracc::Result<NetworkSpec> {
    let sizes = [4usize, 6, 8, 12, 16];
    let nx = sizes[r.gen_range(0..sizes.len())];
    let ny = if r.gen_bool(0.3) { sizes[r.gen_range(0..sizes.len())] } else { nx };
    let nc = r.gen_range(1..=4);
    let classes = r.gen_range(2..=5);
    let loss = if r.gen_bool(0.5) { LossKind::SquareHinge } else { LossKind::Euclidean };
    let mut b = NetworkBuilder::new(&format!("rnd{tag}"), (nx, ny, nc), classes, loss);
    for _ in 0..r.gen_range(0..=2usize) {
        let k = if r.gen_bool(0.7) { 3 } else { 1 };
        let pad = if k == 3 && r.gen_bool(0.8) { 1 } else { 0 };
        let stride = if r.gen_bool(0.25) { 2 } else { 1 };
        b.conv(r.gen_range(1..=8), k, stride, pad, r.gen_bool(0.7))?;
    }
    if r.gen_bool(0.5) {
        b.maxpool(2)?;
    }
    b.flatten()?;
    b.fc(classes, false)?;
    let mut net = b.finish()?;
    net.batch_size = r.gen_range(1..=3);
    net.learning_rate = [0.05, 0.02, 0.01][r.gen_range(0..3)];
    net.momentum = [0.0, 0.5, 0.9][r.gen_range(0..3)];
    Ok(net)
}

/// A random array shape: unroll factors in 1..=8, tile caps in 1..=16
/// (clamped up to the unroll, which the validator requires), and both
/// latency toggles drawn independently.
pub fn random_hw(r: &mut ChaCha8Rng) -> HardwareConfig {
    let (pox, poy, pof) = (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=8));
    HardwareConfig {
        pox,
        poy,
        pof,
        tile_ox: r.gen_range(1..=16usize).max(pox),
        tile_oy: r.gen_range(1..=16usize).max(poy),
        tile_of: r.gen_range(1..=16usize).max(pof),
        tile_if: r.gen_range(1..=16),
        double_buffering: r.gen_bool(0.5),
        load_balancing: r.gen_bool(0.5),
        ..HardwareConfig::default()
    }
}

pub fn config_for(net: NetworkSpec, hw: HardwareConfig, seed: u64) -> Config {
    Config { seed, net, hw, formats: FormatConfig::default(), dataset: DatasetConfig::default() }
}

/// Random image in the unit interval, exact in the activation format.
pub fn random_image(r: &mut ChaCha8Rng, net: &NetworkSpec, fmt: QFormat) -> FxpTensor {
    let (nx, ny, nc) = net.input;
    let mut t = FxpTensor::zeros3(nx, ny, nc, fmt);
    let top = 1i16 << fmt.frac_bits().min(8);
    for v in t.raw_mut() {
        *v = r.gen_range(0..top);
    }
    t
}

/// Compares the complete mutable training state of two engines bit for bit.
pub fn states_identical(a: &TrainState, b: &TrainState) -> Result<(), String> {
    for (i, (wa, wb)) in a.weights.iter().zip(&b.weights).enumerate() {
        match (wa, wb) {
            (Some(x), Some(y)) if x.raw() == y.raw() => {}
            (None, None) => {}
            _ => return Err(format!("layer {i}: weights differ")),
        }
    }
    for (i, (ma, mb)) in a.momentum.iter().zip(&b.momentum).enumerate() {
        match (ma, mb) {
            (Some(x), Some(y)) if x.raw() == y.raw() => {}
            (None, None) => {}
            _ => return Err(format!("layer {i}: momentum differs")),
        }
    }
    if a.saturations() != b.saturations() {
        return Err(format!("saturations differ: {} vs {}", a.saturations(), b.saturations()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Float reference engine.
//
// Same layouts as the fixed-point engine (x fastest, then y, channel,
// filter; kernel tap kx fastest), same conventions (strictly-positive ReLU
// mask, first-maximum pooling in dy/dx scan order, one-sided square hinge),
// but in f64 with no rounding. Gradients from this engine are checked
// against central finite differences.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct Dims(usize, usize, usize);

impl Dims {
    fn at(&self, x: usize, y: usize, c: usize) -> usize {
        x + self.0 * (y + self.1 * c)
    }
    fn len(&self) -> usize {
        self.0 * self.1 * self.2
    }
}

fn wdims(l: &LayerSpec) -> (usize, usize, usize, usize) {
    (l.nkx, l.nky, l.nif, l.nof)
}

fn widx(l: &LayerSpec, kx: usize, ky: usize, c: usize, f: usize) -> usize {
    kx + l.nkx * (ky + l.nky * (c + l.nif * f))
}

pub struct FloatNet {
    pub net: NetworkSpec,
    /// Per layer; empty for layers without weights.
    pub w: Vec<Vec<f64>>,
}

impl FloatNet {
    pub fn random(net: NetworkSpec, r: &mut ChaCha8Rng) -> FloatNet {
        let w = net
            .layers
            .iter()
            .map(|l| {
                let (kx, ky, c, f) = if l.is_mac_layer() { wdims(l) } else { (0, 0, 0, 0) };
                (0..kx * ky * c * f).map(|_| r.gen_range(-0.5..0.5)).collect()
            })
            .collect();
        FloatNet { net, w }
    }

    fn conv_forward(&self, l: &LayerSpec, a: &[f64]) -> Vec<f64> {
        let (di, do_) = (Dims(l.nix, l.niy, l.nif), Dims(l.nox, l.noy, l.nof));
        let w = &self.w[l.index];
        let mut out = vec![0.0; do_.len()];
        for f in 0..l.nof {
            for oy in 0..l.noy {
                for ox in 0..l.nox {
                    let mut s = 0.0;
                    for c in 0..l.nif {
                        for ky in 0..l.nky {
                            for kx in 0..l.nkx {
                                let xi = (ox * l.stride + kx).wrapping_sub(l.pad);
                                let yi = (oy * l.stride + ky).wrapping_sub(l.pad);
                                if xi < l.nix && yi < l.niy {
                                    s += w[widx(l, kx, ky, c, f)] * a[di.at(xi, yi, c)];
                                }
                            }
                        }
                    }
                    out[do_.at(ox, oy, f)] = if l.relu { s.max(0.0) } else { s };
                }
            }
        }
        out
    }

    /// First strict maximum wins, scanning dy then dx, as in the
    /// fixed-point engine.
    fn pool_forward(&self, l: &LayerSpec, a: &[f64]) -> Vec<f64> {
        let (di, do_) = (Dims(l.nix, l.niy, l.nif), Dims(l.nox, l.noy, l.nof));
        let k = l.nkx;
        let mut out = vec![0.0; do_.len()];
        for c in 0..l.nif {
            for oy in 0..l.noy {
                for ox in 0..l.nox {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..k {
                        for dx in 0..k {
                            let v = a[di.at(ox * k + dx, oy * k + dy, c)];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[do_.at(ox, oy, c)] = best;
                }
            }
        }
        out
    }

    fn pool_backward(&self, l: &LayerSpec, a: &[f64], delta: &[f64]) -> Vec<f64> {
        let (di, do_) = (Dims(l.nix, l.niy, l.nif), Dims(l.nox, l.noy, l.nof));
        let k = l.nkx;
        let mut out = vec![0.0; di.len()];
        for c in 0..l.nif {
            for oy in 0..l.noy {
                for ox in 0..l.nox {
                    let (mut best, mut wx, mut wy) = (f64::NEG_INFINITY, 0, 0);
                    for dy in 0..k {
                        for dx in 0..k {
                            let v = a[di.at(ox * k + dx, oy * k + dy, c)];
                            if v > best {
                                (best, wx, wy) = (v, dx, dy);
                            }
                        }
                    }
                    out[di.at(ox * k + wx, oy * k + wy, c)] = delta[do_.at(ox, oy, c)];
                }
            }
        }
        out
    }

    fn conv_backward(&self, l: &LayerSpec, delta: &[f64]) -> Vec<f64> {
        let (di, do_) = (Dims(l.nix, l.niy, l.nif), Dims(l.nox, l.noy, l.nof));
        let w = &self.w[l.index];
        let mut out = vec![0.0; di.len()];
        for c in 0..l.nif {
            for yi in 0..l.niy {
                for xi in 0..l.nix {
                    let mut s = 0.0;
                    for f in 0..l.nof {
                        for ky in 0..l.nky {
                            for kx in 0..l.nkx {
                                let (nx, ny) = (xi + l.pad, yi + l.pad);
                                if nx >= kx && ny >= ky {
                                    let (ox, oy) = (nx - kx, ny - ky);
                                    if ox % l.stride == 0 && oy % l.stride == 0 {
                                        let (ox, oy) = (ox / l.stride, oy / l.stride);
                                        if ox < l.nox && oy < l.noy {
                                            s += w[widx(l, kx, ky, c, f)]
                                                * delta[do_.at(ox, oy, f)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    out[di.at(xi, yi, c)] = s;
                }
            }
        }
        out
    }

    fn weight_gradient(&self, l: &LayerSpec, a: &[f64], delta: &[f64]) -> Vec<f64> {
        let (di, do_) = (Dims(l.nix, l.niy, l.nif), Dims(l.nox, l.noy, l.nof));
        let mut g = vec![0.0; self.w[l.index].len()];
        for f in 0..l.nof {
            for c in 0..l.nif {
                for ky in 0..l.nky {
                    for kx in 0..l.nkx {
                        let mut s = 0.0;
                        for oy in 0..l.noy {
                            for ox in 0..l.nox {
                                let xi = (ox * l.stride + kx).wrapping_sub(l.pad);
                                let yi = (oy * l.stride + ky).wrapping_sub(l.pad);
                                if xi < l.nix && yi < l.niy {
                                    s += a[di.at(xi, yi, c)] * delta[do_.at(ox, oy, f)];
                                }
                            }
                        }
                        g[widx(l, kx, ky, c, f)] = s;
                    }
                }
            }
        }
        g
    }

    fn loss_and_grad(&self, scores: &[f64], label: u8) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; scores.len()];
        let mut loss = 0.0;
        for (i, &s) in scores.iter().enumerate() {
            let hit = i == label as usize;
            match self.net.loss {
                LossKind::Euclidean => {
                    let d = s - if hit { 1.0 } else { 0.0 };
                    loss += 0.5 * d * d;
                    grad[i] = d;
                }
                LossKind::SquareHinge => {
                    let t = if hit { 1.0 } else { -1.0 };
                    let margin = 1.0 - t * s;
                    if margin > 0.0 {
                        loss += margin * margin;
                        grad[i] = -2.0 * t * margin;
                    }
                }
            }
        }
        (loss, grad)
    }

    pub fn loss(&self, image: &[f64], label: u8) -> f64 {
        let mut cur = image.to_vec();
        for l in &self.net.layers {
            cur = match l.kind {
                LayerKind::Conv | LayerKind::FullyConnected => self.conv_forward(l, &cur),
                LayerKind::MaxPool => self.pool_forward(l, &cur),
                LayerKind::Flatten => cur,
                LayerKind::Loss => return self.loss_and_grad(&cur, label).0,
            };
        }
        unreachable!("network ends in a loss layer");
    }

    /// Analytic gradient of the loss with respect to every weight,
    /// one image.
    pub fn grads(&self, image: &[f64], label: u8) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = vec![image.to_vec()];
        for l in &self.net.layers {
            let prev = acts.last().unwrap();
            let next = match l.kind {
                LayerKind::Conv | LayerKind::FullyConnected => self.conv_forward(l, prev),
                LayerKind::MaxPool => self.pool_forward(l, prev),
                LayerKind::Flatten | LayerKind::Loss => prev.clone(),
            };
            acts.push(next);
        }
        let scores = &acts[self.net.layers.len() - 1];
        let (_, mut delta) = self.loss_and_grad(scores, label);
        let mut grads: Vec<Vec<f64>> = self.w.iter().map(|w| vec![0.0; w.len()]).collect();
        for l in self.net.layers.iter().rev() {
            match l.kind {
                LayerKind::Conv | LayerKind::FullyConnected => {
                    if l.relu {
                        // Post-activation output is acts[index + 1]; the mask
                        // is "strictly positive", identical pre or post.
                        for (d, &o) in delta.iter_mut().zip(&acts[l.index + 1]) {
                            if o <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                    grads[l.index] = self.weight_gradient(l, &acts[l.index], &delta);
                    delta = self.conv_backward(l, &delta);
                }
                LayerKind::MaxPool => delta = self.pool_backward(l, &acts[l.index], &delta),
                LayerKind::Flatten | LayerKind::Loss => {}
            }
        }
        grads
    }
}

pub fn random_float_image(r: &mut ChaCha8Rng, net: &NetworkSpec) -> Vec<f64> {
    let (nx, ny, nc) = net.input;
    (0..nx * ny * nc).map(|_| r.gen_range(0.0..1.0)).collect()
}
