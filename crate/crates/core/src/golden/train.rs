//! Whole-network training: forward/backward passes over the reference
//! kernels, per-batch gradient accumulation, and the momentum update.
//!
//! Scheduling mirrors the hardware flow:
//! * one image at a time; per-image weight gradients are requantized and then
//!   accumulated across the batch with saturating 16-bit adds;
//! * the data gradient of the first Conv/FC layer is never computed (nothing
//!   upstream consumes it);
//! * weights change only at batch boundaries, via
//!   [`ops::sgd_momentum_update`], in layer order.
//!
//! Everything is deterministic given the config seed: weight init uses a
//! dedicated counter-based PRNG and nearest-even quantization regardless of
//! the configured rounding mode, and evaluation never touches the training
//! rounder's state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fxp::{Fxp, Rounder, Rounding};
use crate::golden::ops;
use crate::golden::tensor::{BitTensor, FxpTensor, PoolIdx};
use crate::model::{Config, Dataset, FormatConfig, LayerKind, NetworkSpec};
use crate::{Error, Result};

/// Everything saved by a forward pass that the backward pass consumes.
pub struct ForwardTrace {
    /// `layer_inputs[i]` is the tensor layer `i` read; the last entry (input
    /// of the Loss layer) is the score vector.
    pub layer_inputs: Vec<FxpTensor>,
    /// ReLU masks on each layer's output (Conv/FC with ReLU only).
    pub masks: Vec<Option<BitTensor>>,
    /// Pool winner codes (MaxPool layers only).
    pub pool_codes: Vec<Option<PoolIdx>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
    pub images: usize,
}

/// Mutable training state: weights, momentum, and the rounding stream.
#[derive(Debug)]
pub struct TrainState {
    pub net: NetworkSpec,
    pub formats: FormatConfig,
    /// Per layer; `Some` exactly for Conv/FC layers.
    pub weights: Vec<Option<FxpTensor>>,
    /// The update step applied at the previous batch (the momentum state),
    /// same shape as `weights`, in the weight-gradient format.
    pub momentum: Vec<Option<FxpTensor>>,
    pub rounder: Rounder,
    pub alpha: Fxp,
    pub beta: Fxp,
    pub inv_batch: Fxp,
    pub epochs_done: u32,
    pub batches_done: u64,
    pub init_seed: u64,
    first_mac: Option<usize>,
}

impl TrainState {
    pub fn new(cfg: &Config) -> Result<TrainState> {
        let net = cfg.net.clone();
        let formats = cfg.formats;
        let mut init = Rounder::new(Rounding::NearestEven);
        let alpha = init.from_real(net.learning_rate, formats.scalars);
        // An exact zero is a deliberate frozen-weight run; only silent
        // underflow of a positive rate is an error.
        if alpha.raw() == 0 && net.learning_rate > 0.0 {
            return Err(Error::Config(format!(
                "learning_rate {} quantizes to zero in {} scalars",
                net.learning_rate,
                formats.scalars.name()
            )));
        }
        let beta = init.from_real(net.momentum, formats.scalars);
        let inv_batch = init.from_real(1.0 / net.batch_size as f64, formats.scalars);
        if inv_batch.raw() == 0 {
            return Err(Error::Config(format!(
                "batch_size {} has no nonzero reciprocal in {} scalars",
                net.batch_size,
                formats.scalars.name()
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut weights = Vec::with_capacity(net.layers.len());
        let mut momentum = Vec::with_capacity(net.layers.len());
        for l in &net.layers {
            if l.is_mac_layer() {
                // Uniform fan-in init: +-sqrt(6 / fan_in), quantized to the
                // weight format with nearest-even.
                let bound = (6.0 / (l.nkx * l.nky * l.nif) as f64).sqrt();
                let mut w = FxpTensor::zeros([l.nkx, l.nky, l.nif, l.nof], formats.weights);
                for v in w.raw_mut() {
                    *v = init.from_real(rng.gen_range(-bound..bound), formats.weights).raw();
                }
                weights.push(Some(w));
                momentum.push(Some(FxpTensor::zeros(
                    [l.nkx, l.nky, l.nif, l.nof],
                    formats.weight_gradients,
                )));
            } else {
                weights.push(None);
                momentum.push(None);
            }
        }
        let first_mac = net.layers.iter().position(|l| l.is_mac_layer());
        Ok(TrainState {
            net,
            formats,
            weights,
            momentum,
            rounder: Rounder::new(formats.rounding),
            alpha,
            beta,
            inv_batch,
            epochs_done: 0,
            batches_done: 0,
            init_seed: cfg.seed,
            first_mac,
        })
    }

    pub fn first_mac(&self) -> Option<usize> {
        self.first_mac
    }

    /// Saturation count accumulated by the training rounder so far.
    pub fn saturations(&self) -> u64 {
        self.rounder.saturations()
    }

    /// Forward pass of one image, saving everything backward needs.
    pub fn forward_trace(&mut self, image: &FxpTensor) -> ForwardTrace {
        let n = self.net.layers.len();
        let mut trace = ForwardTrace {
            layer_inputs: Vec::with_capacity(n),
            masks: vec![None; n],
            pool_codes: vec![None; n],
        };
        let mut cur = image.clone();
        for i in 0..n {
            let l = self.net.layers[i];
            trace.layer_inputs.push(cur.clone());
            match l.kind {
                LayerKind::Conv | LayerKind::FullyConnected => {
                    let w = self.weights[i].as_ref().expect("mac layer has weights");
                    let o = ops::conv_forward(
                        &cur,
                        w,
                        l.stride,
                        l.pad,
                        self.formats.activations,
                        &mut self.rounder,
                    );
                    if l.relu {
                        let (a, m) = ops::relu_forward(&o);
                        cur = a;
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

    /// Forward pass for evaluation; uses the supplied rounder so it never
    /// advances the training stream.
    pub fn scores_with(&self, image: &FxpTensor, rounder: &mut Rounder) -> FxpTensor {
        let mut cur = image.clone();
        for (i, l) in self.net.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Conv | LayerKind::FullyConnected => {
                    let w = self.weights[i].as_ref().expect("mac layer has weights");
                    let o = ops::conv_forward(
                        &cur,
                        w,
                        l.stride,
                        l.pad,
                        self.formats.activations,
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

    /// ReLU mask guarding layer `i`'s input, i.e. the mask of the nearest
    /// upstream Conv/FC output. Flatten is transparent (masks are linear);
    /// a pool or the network input yields no mask.
    fn input_mask<'t>(
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

    /// Backward pass of one image. Adds this image's requantized weight
    /// gradients into `dw_sums` (saturating) and returns the loss value.
    pub fn backward(
        &mut self,
        trace: &ForwardTrace,
        label: u8,
        dw_sums: &mut [Option<FxpTensor>],
    ) -> f64 {
        let last = self.net.layers.len() - 1;
        debug_assert_eq!(self.net.layers[last].kind, LayerKind::Loss);
        let (loss, mut delta) = ops::compute_loss(
            &trace.layer_inputs[last],
            label,
            self.net.loss,
            self.formats.gradients,
            &mut self.rounder,
        );
        for i in (0..last).rev() {
            let l = self.net.layers[i];
            match l.kind {
                LayerKind::Conv | LayerKind::FullyConnected => {
                    let dw = ops::conv_weight_gradient(
                        &trace.layer_inputs[i],
                        &delta,
                        l.nkx,
                        l.nky,
                        l.stride,
                        l.pad,
                        self.formats.weight_gradients,
                        &mut self.rounder,
                    );
                    let sum = dw_sums[i].as_mut().expect("mac layer has a gradient slot");
                    for (s, &v) in sum.raw_mut().iter_mut().zip(dw.raw()) {
                        *s = self.rounder.add_sat_raw(*s, v);
                    }
                    if Some(i) == self.first_mac {
                        break; // nothing upstream consumes a data gradient
                    }
                    let mask = Self::input_mask(&self.net, trace, i);
                    delta = ops::conv_backward_data(
                        &delta,
                        self.weights[i].as_ref().expect("mac layer has weights"),
                        [l.nix, l.niy, l.nif],
                        mask,
                        l.stride,
                        l.pad,
                        self.formats.gradients,
                        &mut self.rounder,
                    );
                }
                LayerKind::MaxPool => {
                    let mask = Self::input_mask(&self.net, trace, i);
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

    /// One full batch: per-image forward/backward, then the weight update.
    /// Returns the mean loss over the batch.
    pub fn train_batch(&mut self, images: &[&FxpTensor], labels: &[u8]) -> f64 {
        assert_eq!(images.len(), labels.len());
        assert!(!images.is_empty());
        let mut dw_sums: Vec<Option<FxpTensor>> = self
            .net
            .layers
            .iter()
            .map(|l| {
                l.is_mac_layer().then(|| {
                    FxpTensor::zeros(
                        [l.nkx, l.nky, l.nif, l.nof],
                        self.formats.weight_gradients,
                    )
                })
            })
            .collect();
        let mut loss_total = 0.0;
        for (img, &label) in images.iter().zip(labels) {
            let trace = self.forward_trace(img);
            loss_total += self.backward(&trace, label, &mut dw_sums);
        }
        for i in 0..self.net.layers.len() {
            if let Some(sum) = &dw_sums[i] {
                let w = self.weights[i].as_ref().expect("mac layer has weights");
                let prev = self.momentum[i].as_ref().expect("mac layer has momentum");
                let (w_new, v_new) = ops::sgd_momentum_update(
                    w,
                    sum,
                    prev,
                    self.alpha,
                    self.beta,
                    self.inv_batch,
                    &mut self.rounder,
                );
                self.weights[i] = Some(w_new);
                self.momentum[i] = Some(v_new);
            }
        }
        self.batches_done += 1;
        loss_total / images.len() as f64
    }

    /// One pass over the dataset in full batches; a trailing partial batch is
    /// dropped (batch size is part of the update semantics).
    pub fn run_epoch(&mut self, data: &Dataset) -> EpochStats {
        let bs = self.net.batch_size;
        let batches = data.len() / bs;
        let mut total = 0.0;
        for b in 0..batches {
            let imgs: Vec<&FxpTensor> = data.images[b * bs..(b + 1) * bs].iter().collect();
            total += self.train_batch(&imgs, &data.labels[b * bs..(b + 1) * bs]);
        }
        self.epochs_done += 1;
        EpochStats {
            mean_loss: if batches > 0 { total / batches as f64 } else { 0.0 },
            batches,
            images: batches * bs,
        }
    }

    fn eval_rounder(&self) -> Rounder {
        Rounder::new(self.formats.rounding)
    }
}

/// Index of the highest raw score; ties go to the lowest class index.
pub(crate) fn argmax_raw(scores: &FxpTensor) -> usize {
    let mut best = 0;
    for (i, &v) in scores.raw().iter().enumerate() {
        if v > scores.raw()[best] {
            best = i;
        }
    }
    best
}

/// Classification accuracy over a dataset: (correct, total).
pub fn evaluate_accuracy(state: &TrainState, data: &Dataset) -> (usize, usize) {
    let mut r = state.eval_rounder();
    let mut correct = 0;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let scores = state.scores_with(img, &mut r);
        if argmax_raw(&scores) == label as usize {
            correct += 1;
        }
    }
    (correct, data.len())
}

/// Mean loss over a dataset without updating any state.
pub fn evaluate_mean_loss(state: &TrainState, data: &Dataset) -> f64 {
    let mut r = state.eval_rounder();
    let mut total = 0.0;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let scores = state.scores_with(img, &mut r);
        let (loss, _) = ops::compute_loss(
            &scores,
            label,
            state.net.loss,
            state.formats.gradients,
            &mut r,
        );
        total += loss;
    }
    total / data.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::QFormat;
    use crate::model::parse_config;

    const TINY: &str = r#"
        seed = 7
        [network]
        name = "tiny"
        input = [8, 8, 3]
        num_classes = 4
        description = "4C3-P-FC"
        [training]
        batch_size = 4
        learning_rate = 0.05
        momentum = 0.0
        epochs = 1
    "#;

    fn random_images(n: usize, rng_seed: u64) -> (Vec<FxpTensor>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let mut t = FxpTensor::zeros3(8, 8, 3, QFormat::Q8_8);
            for v in t.raw_mut() {
                *v = rng.gen_range(0..256);
            }
            images.push(t);
            labels.push((i % 4) as u8);
        }
        (images, labels)
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = parse_config(TINY).unwrap();
        let a = TrainState::new(&cfg).unwrap();
        let b = TrainState::new(&cfg).unwrap();
        for i in 0..a.weights.len() {
            assert_eq!(
                a.weights[i].as_ref().map(|w| w.raw().to_vec()),
                b.weights[i].as_ref().map(|w| w.raw().to_vec())
            );
        }
        let mut other = parse_config(TINY).unwrap();
        other.seed = 8;
        let c = TrainState::new(&other).unwrap();
        assert_ne!(
            a.weights[0].as_ref().unwrap().raw(),
            c.weights[0].as_ref().unwrap().raw()
        );
        // |w| <= sqrt(6 / fan_in) + half an ulp, per layer.
        for l in cfg.net.conv_fc_layers() {
            let bound = (6.0 / (l.nkx * l.nky * l.nif) as f64).sqrt();
            let w = a.weights[l.index].as_ref().unwrap();
            let limit = bound * w.fmt().scale() + 0.5;
            assert!(w.raw().iter().all(|&v| (v as f64).abs() <= limit));
        }
    }

    #[test]
    fn repeated_batches_reduce_loss_on_that_batch() {
        let mut cfg = parse_config(TINY).unwrap();
        // Gentle steps: hot rates diverge in 16-bit and (correctly) trip the
        // accumulator hard error once weights and activations saturate.
        cfg.net.learning_rate = 0.02;
        let mut st = TrainState::new(&cfg).unwrap();
        let (images, labels) = random_images(4, 99);
        let refs: Vec<&FxpTensor> = images.iter().collect();
        let initial = st.train_batch(&refs, &labels);
        let mut last = initial;
        for _ in 0..30 {
            last = st.train_batch(&refs, &labels);
        }
        assert!(
            last < 0.7 * initial,
            "loss should drop when overfitting one batch: {initial} -> {last}"
        );
        assert_eq!(st.batches_done, 31);
        // Momentum picked up nonzero state.
        assert!(st.momentum[0].as_ref().unwrap().raw().iter().any(|&v| v != 0));
    }

    #[test]
    fn epoch_drops_partial_trailing_batch() {
        let cfg = parse_config(TINY).unwrap();
        let mut st = TrainState::new(&cfg).unwrap();
        let (images, labels) = random_images(10, 3);
        let data = Dataset { images, labels, source: "test".into() };
        let stats = st.run_epoch(&data);
        assert_eq!(stats.batches, 2); // 10 images, batch 4 -> 2 full batches
        assert_eq!(stats.images, 8);
        assert_eq!(st.epochs_done, 1);
    }

    #[test]
    fn single_layer_net_trains_without_data_gradient() {
        let toml = r#"
            seed = 1
            [network]
            name = "fc-only"
            input = [4, 4, 2]
            num_classes = 3
            description = "FC"
            [training]
            batch_size = 2
            learning_rate = 0.05
            momentum = 0.0
        "#;
        let cfg = parse_config(toml).unwrap();
        let mut st = TrainState::new(&cfg).unwrap();
        assert_eq!(st.first_mac(), Some(1)); // flatten, then the FC layer
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut img = FxpTensor::zeros3(4, 4, 2, QFormat::Q8_8);
        for v in img.raw_mut() {
            *v = rng.gen_range(0..256);
        }
        let before = st.weights[1].as_ref().unwrap().raw().to_vec();
        st.train_batch(&[&img, &img], &[0, 1]);
        assert_ne!(st.weights[1].as_ref().unwrap().raw(), &before[..]);
    }

    #[test]
    fn evaluation_does_not_disturb_training_state() {
        let cfg = parse_config(TINY).unwrap();
        let st = TrainState::new(&cfg).unwrap();
        let (images, labels) = random_images(8, 42);
        let data = Dataset { images, labels, source: "test".into() };
        let pos_before = st.rounder.stream_pos();
        let sat_before = st.saturations();
        let (c1, t1) = evaluate_accuracy(&st, &data);
        let l1 = evaluate_mean_loss(&st, &data);
        let (c2, _) = evaluate_accuracy(&st, &data);
        let l2 = evaluate_mean_loss(&st, &data);
        assert_eq!((c1, l1), (c2, l2));
        assert_eq!(t1, 8);
        assert_eq!(st.rounder.stream_pos(), pos_before);
        assert_eq!(st.saturations(), sat_before);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let mut s = FxpTensor::zeros3(1, 1, 4, QFormat::Q8_8);
        s.raw_mut().copy_from_slice(&[5, 9, 9, 2]);
        assert_eq!(argmax_raw(&s), 1);
    }

    #[test]
    fn microscopic_learning_rate_is_rejected() {
        let mut cfg = parse_config(TINY).unwrap();
        cfg.net.learning_rate = 1e-9;
        let err = TrainState::new(&cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }
}
