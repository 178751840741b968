//! Downstream per-patch segmentation models sharing the surrogate encoder:
//! frozen (head only), adapter (added residual MLPs), and full fine-tune.
//! Training is plain seeded mini-batch gradient descent on a softmax
//! cross-entropy over patch labels.

use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::encoder::layers::{gelu, gelu_deriv, linear_backward, linear_forward};
use crate::encoder::{BlockCache, EncoderWeights};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;
pub const ADAPTER_HIDDEN: usize = 16;

/// Which parameters the downstream fine-tune may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Encoder bit-identical to the surrogate; only the head trains.
    Frozen,
    /// Adds zero-initialized residual MLPs after each block; encoder frozen.
    Adapter,
    /// Every parameter trains.
    Full,
}

impl Variant {
    pub fn all() -> [Variant; 3] {
        [Variant::Frozen, Variant::Adapter, Variant::Full]
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Frozen => "frozen",
            Variant::Adapter => "adapter",
            Variant::Full => "full",
        }
    }
}

/// Residual bottleneck inserted after a block: x + W2 gelu(W1 x + b1) + b2.
/// W2 and b2 start at zero, so the untrained adapter is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    w1: Vec<f64>, // A x D
    b1: Vec<f64>, // A
    w2: Vec<f64>, // D x A
    b2: Vec<f64>, // D
}

struct AdapterCache {
    x: Vec<f64>, // T*D input
    a: Vec<f64>, // T*A pre-gelu
    g: Vec<f64>, // T*A post-gelu
}

impl AdapterWeights {
    fn init(d: usize, rng: &mut RngState) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        AdapterWeights {
            w1: (0..ADAPTER_HIDDEN * d)
                .map(|_| (rng.normal() * scale) as f32 as f64)
                .collect(),
            b1: vec![0.0; ADAPTER_HIDDEN],
            w2: vec![0.0; d * ADAPTER_HIDDEN],
            b2: vec![0.0; d],
        }
    }

    fn forward(&self, x: &[f64], tokens: usize, d: usize) -> (Vec<f64>, AdapterCache) {
        let ah = ADAPTER_HIDDEN;
        let mut a = vec![0.0; tokens * ah];
        let mut g = vec![0.0; tokens * ah];
        let mut out = x.to_vec();
        for t in 0..tokens {
            linear_forward(
                &self.w1,
                &self.b1,
                &x[t * d..(t + 1) * d],
                &mut a[t * ah..(t + 1) * ah],
                d,
                ah,
            );
            for i in 0..ah {
                g[t * ah + i] = gelu(a[t * ah + i]);
            }
            let mut r = vec![0.0; d];
            linear_forward(&self.w2, &self.b2, &g[t * ah..(t + 1) * ah], &mut r, ah, d);
            for i in 0..d {
                out[t * d + i] += r[i];
            }
        }
        (out, AdapterCache { x: x.to_vec(), a, g })
    }

    /// Returns the input gradient; optionally accumulates parameter grads.
    fn backward(
        &self,
        cache: &AdapterCache,
        dout: &[f64],
        tokens: usize,
        d: usize,
        mut grads: Option<&mut AdapterWeights>,
    ) -> Vec<f64> {
        let ah = ADAPTER_HIDDEN;
        let mut dx = dout.to_vec();
        for t in 0..tokens {
            let dout_t = &dout[t * d..(t + 1) * d];
            let mut dg = vec![0.0; ah];
            let (dw2, db2) = match grads.as_deref_mut() {
                Some(g) => (Some(&mut g.w2[..]), Some(&mut g.b2[..])),
                None => (None, None),
            };
            linear_backward(
                &self.w2,
                &cache.g[t * ah..(t + 1) * ah],
                dout_t,
                Some(&mut dg),
                dw2,
                db2,
                ah,
                d,
            );
            let mut da = vec![0.0; ah];
            for i in 0..ah {
                da[i] = dg[i] * gelu_deriv(cache.a[t * ah + i]);
            }
            let (dw1, db1) = match grads.as_deref_mut() {
                Some(g) => (Some(&mut g.w1[..]), Some(&mut g.b1[..])),
                None => (None, None),
            };
            linear_backward(
                &self.w1,
                &cache.x[t * d..(t + 1) * d],
                &da,
                Some(&mut dx[t * d..(t + 1) * d]),
                dw1,
                db1,
                d,
                ah,
            );
        }
        dx
    }

    fn zeroed(d: usize) -> Self {
        AdapterWeights {
            w1: vec![0.0; ADAPTER_HIDDEN * d],
            b1: vec![0.0; ADAPTER_HIDDEN],
            w2: vec![0.0; d * ADAPTER_HIDDEN],
            b2: vec![0.0; d],
        }
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn slices(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

/// Per-token linear classifier over patch labels.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    w: Vec<f64>, // NUM_CLASSES x D
    b: Vec<f64>, // NUM_CLASSES
}

impl HeadWeights {
    fn init(d: usize, rng: &mut RngState) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        HeadWeights {
            w: (0..NUM_CLASSES * d)
                .map(|_| (rng.normal() * scale) as f32 as f64)
                .collect(),
            b: vec![0.0; NUM_CLASSES],
        }
    }

    fn zeroed(d: usize) -> Self {
        HeadWeights {
            w: vec![0.0; NUM_CLASSES * d],
            b: vec![0.0; NUM_CLASSES],
        }
    }
}

/// Trained downstream model; the variant tag fixes which parts may have
/// diverged from the surrogate.
#[derive(Debug, Clone)]
pub struct DownstreamModel {
    variant: Variant,
    encoder: EncoderWeights,
    adapters: Vec<AdapterWeights>,
    head: HeadWeights,
    /// Mean cross-entropy per epoch, recorded during training.
    pub training_loss: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 20,
            learning_rate: 0.05,
            batch: 8,
        }
    }
}

struct ChainCache {
    patches: Vec<f64>,
    blocks: Vec<BlockCache>,
    adapters: Vec<AdapterCache>,
}

/// Encoder blocks with adapters (possibly none) interleaved after each.
fn forward_chain(
    enc: &EncoderWeights,
    adapters: &[AdapterWeights],
    image: &Tensor,
) -> Result<(Vec<f64>, ChainCache)> {
    let spec = *enc.spec();
    if image.shape() != spec.image_shape().as_slice() {
        return Err(Error::shape(format!(
            "image shape {:?} does not match encoder input {:?}",
            image.shape(),
            spec.image_shape()
        )));
    }
    let (t, d) = (spec.num_tokens(), spec.embed_dim);
    let (patches, emb0) = enc.embed_patches(image);
    let mut x = emb0;
    let mut blocks = Vec::with_capacity(spec.num_blocks);
    let mut acaches = Vec::new();
    for bi in 0..spec.num_blocks {
        let (next, cache) = enc.block_forward(bi, &x);
        blocks.push(cache);
        x = next;
        if let Some(ad) = adapters.get(bi) {
            let (next, ac) = ad.forward(&x, t, d);
            acaches.push(ac);
            x = next;
        }
    }
    Ok((
        x,
        ChainCache {
            patches,
            blocks,
            adapters: acaches,
        },
    ))
}

/// Reverse pass mirroring [`forward_chain`]. Encoder parameter grads are
/// accumulated only when `enc_grads` is given; adapter grads likewise.
fn backward_chain(
    enc: &EncoderWeights,
    adapters: &[AdapterWeights],
    cache: &ChainCache,
    mut dtokens: Vec<f64>,
    mut enc_grads: Option<&mut EncoderWeights>,
    mut adapter_grads: Option<&mut Vec<AdapterWeights>>,
) {
    let spec = *enc.spec();
    let (t, d) = (spec.num_tokens(), spec.embed_dim);
    for bi in (0..spec.num_blocks).rev() {
        if let Some(ad) = adapters.get(bi) {
            let ag = adapter_grads.as_deref_mut().map(|g| &mut g[bi]);
            dtokens = ad.backward(&cache.adapters[bi], &dtokens, t, d, ag);
        }
        let bg = enc_grads.as_deref_mut().map(|g| &mut g.blocks[bi]);
        dtokens = enc.block_backward(bi, &cache.blocks[bi], &dtokens, bg);
    }
    if let Some(g) = enc_grads {
        enc.patch_backward(&cache.patches, &dtokens, Some(g));
    }
}

impl DownstreamModel {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn encoder(&self) -> &EncoderWeights {
        &self.encoder
    }

    /// Per-patch class logits, row-major over the patch grid.
    pub fn segmentation_logits(&self, image: &Tensor) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let (tokens, _) = forward_chain(&self.encoder, &self.adapters, image)?;
        let d = self.encoder.spec().embed_dim;
        let t = self.encoder.spec().num_tokens();
        let mut out = Vec::with_capacity(t);
        for tok in 0..t {
            let mut logits = [0.0; NUM_CLASSES];
            linear_forward(
                &self.head.w,
                &self.head.b,
                &tokens[tok * d..(tok + 1) * d],
                &mut logits,
                d,
                NUM_CLASSES,
            );
            out.push(logits);
        }
        Ok(out)
    }

    /// Fraction of patches whose argmax logit matches the label.
    pub fn patch_accuracy(&self, image: &Tensor, labels: &[u8]) -> Result<f64> {
        let logits = self.segmentation_logits(image)?;
        if labels.len() != logits.len() {
            return Err(Error::shape(format!(
                "{} labels for {} patches",
                labels.len(),
                logits.len()
            )));
        }
        let correct = logits
            .iter()
            .zip(labels)
            .filter(|(z, &y)| u8::from(z[1] > z[0]) == y)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// Softmax cross-entropy over one token; returns loss and writes dlogits.
fn ce_loss(logits: &[f64; NUM_CLASSES], label: u8, dlogits: &mut [f64; NUM_CLASSES]) -> f64 {
    let max = logits[0].max(logits[1]);
    let e0 = (logits[0] - max).exp();
    let e1 = (logits[1] - max).exp();
    let z = e0 + e1;
    let p = [e0 / z, e1 / z];
    for (i, dl) in dlogits.iter_mut().enumerate() {
        *dl = p[i] - f64::from(u8::from(i == label as usize));
    }
    -p[label as usize].max(f64::MIN_POSITIVE).ln()
}

/// Builds and trains a downstream model from the surrogate encoder.
///
/// The head is drawn first and the adapters second from `rng`, so frozen
/// and adapter models built with equal seeds share the head.
pub fn make_downstream(
    surrogate: &EncoderWeights,
    variant: Variant,
    train: &[LabeledImage],
    settings: TrainSettings,
    rng: &mut RngState,
) -> Result<DownstreamModel> {
    if train.is_empty() {
        return Err(Error::parameter("training set must be nonempty".to_string()));
    }
    if settings.batch == 0 {
        return Err(Error::parameter("batch size must be >= 1".to_string()));
    }
    if !(settings.learning_rate.is_finite() && settings.learning_rate > 0.0) {
        return Err(Error::parameter(format!(
            "learning rate must be positive, got {}",
            settings.learning_rate
        )));
    }
    let spec = *surrogate.spec();
    let (t, d) = (spec.num_tokens(), spec.embed_dim);
    for (i, li) in train.iter().enumerate() {
        if li.labels.len() != t {
            return Err(Error::shape(format!(
                "train image {i}: {} labels for {t} patches",
                li.labels.len()
            )));
        }
    }
    let head = HeadWeights::init(d, rng);
    let adapters = match variant {
        Variant::Adapter => (0..spec.num_blocks).map(|_| AdapterWeights::init(d, rng)).collect(),
        _ => Vec::new(),
    };
    let mut model = DownstreamModel {
        variant,
        encoder: surrogate.clone(),
        adapters,
        head,
        training_loss: Vec::with_capacity(settings.epochs),
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..settings.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(settings.batch) {
            let mut head_gw = HeadWeights::zeroed(d);
            let mut enc_grads = match variant {
                Variant::Full => Some(EncoderWeights::zeroed(spec)?),
                _ => None,
            };
            let mut adapter_grads = match variant {
                Variant::Adapter => {
                    Some((0..spec.num_blocks).map(|_| AdapterWeights::zeroed(d)).collect::<Vec<_>>())
                }
                _ => None,
            };
            for &i in chunk {
                let li = &train[i];
                let (tokens, cache) = forward_chain(&model.encoder, &model.adapters, &li.image)?;
                let mut dtokens = vec![0.0; t * d];
                let mut sample_loss = 0.0;
                for tok in 0..t {
                    let x = &tokens[tok * d..(tok + 1) * d];
                    let mut logits = [0.0; NUM_CLASSES];
                    linear_forward(&model.head.w, &model.head.b, x, &mut logits, d, NUM_CLASSES);
                    let mut dlogits = [0.0; NUM_CLASSES];
                    sample_loss += ce_loss(&logits, li.labels[tok], &mut dlogits);
                    // Mean over tokens.
                    for v in &mut dlogits {
                        *v /= t as f64;
                    }
                    linear_backward(
                        &model.head.w,
                        x,
                        &dlogits,
                        Some(&mut dtokens[tok * d..(tok + 1) * d]),
                        Some(&mut head_gw.w),
                        Some(&mut head_gw.b),
                        d,
                        NUM_CLASSES,
                    );
                }
                epoch_loss += sample_loss / t as f64;
                if variant != Variant::Frozen {
                    backward_chain(
                        &model.encoder,
                        &model.adapters,
                        &cache,
                        dtokens,
                        enc_grads.as_mut(),
                        adapter_grads.as_mut(),
                    );
                }
            }
            let step = settings.learning_rate / chunk.len() as f64;
            for (w, g) in model.head.w.iter_mut().zip(&head_gw.w) {
                *w -= step * g;
            }
            for (w, g) in model.head.b.iter_mut().zip(&head_gw.b) {
                *w -= step * g;
            }
            if let Some(gr) = enc_grads {
                for (ws, gs) in model
                    .encoder
                    .param_slices_mut()
                    .into_iter()
                    .zip(gr.param_slices())
                {
                    for (w, g) in ws.iter_mut().zip(gs) {
                        *w -= step * g;
                    }
                }
            }
            if let Some(gr) = adapter_grads {
                for (ad, g) in model.adapters.iter_mut().zip(&gr) {
                    for (ws, gs) in ad.slices_mut().into_iter().zip(g.slices()) {
                        for (w, gv) in ws.iter_mut().zip(gs) {
                            *w -= step * gv;
                        }
                    }
                }
            }
        }
        let mean = epoch_loss / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training { epoch });
        }
        model.training_loss.push(mean);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderSpec;

    fn small_spec() -> EncoderSpec {
        EncoderSpec {
            image_side: 8,
            channels: 3,
            patch_side: 4,
            embed_dim: 8,
            num_blocks: 2,
            mlp_hidden: 16,
        }
    }

    fn toy_train(spec: &EncoderSpec, n: usize, rng: &mut RngState) -> Vec<LabeledImage> {
        let t = spec.num_tokens();
        let len = spec.channels * spec.image_side * spec.image_side;
        (0..n)
            .map(|_| {
                // Bright images get label-1 patches where mean pixel > 0.5.
                let data: Vec<f64> = (0..len).map(|_| rng.next_f64()).collect();
                let image = Tensor::new(spec.image_shape(), data).unwrap();
                let labels = (0..t).map(|i| u8::from(i % 2 == 0)).collect();
                LabeledImage { image, labels }
            })
            .collect()
    }

    #[test]
    fn frozen_keeps_encoder_bit_identical() {
        let mut rng = RngState::new(20);
        let surr = EncoderWeights::init(small_spec(), &mut rng).unwrap();
        let train = toy_train(surr.spec(), 4, &mut rng);
        let settings = TrainSettings {
            epochs: 3,
            ..TrainSettings::default()
        };
        let m = make_downstream(&surr, Variant::Frozen, &train, settings, &mut rng).unwrap();
        assert_eq!(m.encoder(), &surr);
        assert_eq!(m.training_loss.len(), 3);
    }

    #[test]
    fn untrained_adapter_equals_frozen() {
        let mut rng = RngState::new(21);
        let surr = EncoderWeights::init(small_spec(), &mut rng).unwrap();
        let train = toy_train(surr.spec(), 2, &mut rng);
        let settings = TrainSettings {
            epochs: 0,
            ..TrainSettings::default()
        };
        let frozen =
            make_downstream(&surr, Variant::Frozen, &train, settings, &mut RngState::new(7))
                .unwrap();
        let adapter =
            make_downstream(&surr, Variant::Adapter, &train, settings, &mut RngState::new(7))
                .unwrap();
        let img = &train[0].image;
        let zf = frozen.segmentation_logits(img).unwrap();
        let za = adapter.segmentation_logits(img).unwrap();
        for (a, b) in zf.iter().zip(&za) {
            assert!((a[0] - b[0]).abs() <= 1e-6 && (a[1] - b[1]).abs() <= 1e-6);
        }
    }

    #[test]
    fn full_training_loss_decreases() {
        let mut rng = RngState::new(22);
        let surr = EncoderWeights::init(small_spec(), &mut rng).unwrap();
        let train = toy_train(surr.spec(), 6, &mut rng);
        let settings = TrainSettings {
            epochs: 5,
            learning_rate: 0.05,
            batch: 3,
        };
        let m = make_downstream(&surr, Variant::Full, &train, settings, &mut rng).unwrap();
        for w in m.training_loss.windows(2) {
            assert!(w[1] < w[0], "loss not strictly decreasing: {:?}", m.training_loss);
        }
    }

    #[test]
    fn adapter_training_moves_only_adapters() {
        let mut rng = RngState::new(23);
        let surr = EncoderWeights::init(small_spec(), &mut rng).unwrap();
        let train = toy_train(surr.spec(), 4, &mut rng);
        let settings = TrainSettings {
            epochs: 2,
            ..TrainSettings::default()
        };
        let m = make_downstream(&surr, Variant::Adapter, &train, settings, &mut rng).unwrap();
        assert_eq!(m.encoder(), &surr);
        // Adapter last-layer weights must have moved off zero.
        assert!(m.adapters.iter().any(|a| a.w2.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = RngState::new(24);
        let surr = EncoderWeights::init(small_spec(), &mut rng).unwrap();
        let train = toy_train(surr.spec(), 4, &mut rng);
        let settings = TrainSettings {
            epochs: 3,
            ..TrainSettings::default()
        };
        let a = make_downstream(&surr, Variant::Full, &train, settings, &mut RngState::new(5))
            .unwrap();
        let b = make_downstream(&surr, Variant::Full, &train, settings, &mut RngState::new(5))
            .unwrap();
        assert_eq!(a.training_loss, b.training_loss);
        let img = &train[0].image;
        assert_eq!(
            a.segmentation_logits(img).unwrap(),
            b.segmentation_logits(img).unwrap()
        );
    }

    #[test]
    fn adapter_gradients_match_fd() {
        let mut rng = RngState::new(25);
        let spec = small_spec();
        let surr = EncoderWeights::init(spec, &mut rng).unwrap();
        let train = toy_train(surr.spec(), 1, &mut rng);
        let li = &train[0];
        let (t, d) = (spec.num_tokens(), spec.embed_dim);
        let adapters: Vec<AdapterWeights> =
            (0..spec.num_blocks).map(|_| AdapterWeights::init(d, &mut rng)).collect();
        let head = HeadWeights::init(d, &mut rng);
        let loss_of = |ads: &[AdapterWeights]| -> f64 {
            let (tokens, _) = forward_chain(&surr, ads, &li.image).unwrap();
            let mut total = 0.0;
            for tok in 0..t {
                let mut logits = [0.0; NUM_CLASSES];
                linear_forward(
                    &head.w,
                    &head.b,
                    &tokens[tok * d..(tok + 1) * d],
                    &mut logits,
                    d,
                    NUM_CLASSES,
                );
                let mut dl = [0.0; NUM_CLASSES];
                total += ce_loss(&logits, li.labels[tok], &mut dl);
            }
            total / t as f64
        };
        // Analytic grads via the chain backward.
        let (tokens, cache) = forward_chain(&surr, &adapters, &li.image).unwrap();
        let mut dtokens = vec![0.0; t * d];
        for tok in 0..t {
            let x = &tokens[tok * d..(tok + 1) * d];
            let mut logits = [0.0; NUM_CLASSES];
            linear_forward(&head.w, &head.b, x, &mut logits, d, NUM_CLASSES);
            let mut dlogits = [0.0; NUM_CLASSES];
            ce_loss(&logits, li.labels[tok], &mut dlogits);
            for v in &mut dlogits {
                *v /= t as f64;
            }
            linear_backward(
                &head.w,
                x,
                &dlogits,
                Some(&mut dtokens[tok * d..(tok + 1) * d]),
                None,
                None,
                d,
                NUM_CLASSES,
            );
        }
        let mut grads: Vec<AdapterWeights> =
            (0..spec.num_blocks).map(|_| AdapterWeights::zeroed(d)).collect();
        backward_chain(&surr, &adapters, &cache, dtokens, None, Some(&mut grads));
        let h = 1e-5;
        for bi in 0..spec.num_blocks {
            for &(si, idx) in &[(0usize, 2usize), (2, 1)] {
                let analytic = grads[bi].slices()[si][idx];
                let mut plus = adapters.clone();
                plus[bi].slices_mut()[si][idx] += h;
                let mut minus = adapters.clone();
                minus[bi].slices_mut()[si][idx] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-4,
                    "block {bi} slice {si} idx {idx}: analytic={analytic} fd={fd}"
                );
            }
        }
    }

    #[test]
    fn bad_inputs_rejected() {
        let mut rng = RngState::new(26);
        let surr = EncoderWeights::init(small_spec(), &mut rng).unwrap();
        let settings = TrainSettings::default();
        assert!(make_downstream(&surr, Variant::Frozen, &[], settings, &mut rng).is_err());
        let mut train = toy_train(surr.spec(), 1, &mut rng);
        train[0].labels.pop();
        assert!(make_downstream(&surr, Variant::Frozen, &train, settings, &mut rng).is_err());
    }
}
