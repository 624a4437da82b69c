//! The classification network: a small trunk producing a d-dimensional
//! embedding, followed by a bias-free linear classifier emitting k logits.
//!
//! Architectures (`C'` is 2 with Sobel preprocessing, otherwise the image
//! channel count):
//!
//! | arch         | parameter            | shape                    |
//! |--------------|----------------------|--------------------------|
//! | `conv-small` | `layer0.weight/bias` | 16×C'×3×3 / 16           |
//! |              | `layer1.weight/bias` | 32×16×3×3 / 32           |
//! |              | `layer2.weight/bias` | (32·⌊H/4⌋·⌊W/4⌋)×d / d     |
//! | `mlp`        | `layer0.weight/bias` | (C'·H·W)×hidden / hidden |
//! |              | `layer1.weight/bias` | hidden×d / d             |
//! | both         | `classifier.weight`  | d×k                      |
//!
//! `conv-small` runs conv-ReLU-pool twice, flattens, then affine-ReLU. For a
//! 1×16×16 input with Sobel, d = 64 and k = 30 that is 16×2×3×3, 32×16×3×3,
//! 512×64 and 64×30. The embedding is the post-ReLU output of the last trunk
//! layer.

use serde::{Deserialize, Serialize};

use crate::augment::ImageShape;
use crate::error::{Error, Result};
use crate::gradcheck::Evaluation;
use crate::optim::ParamSet;
use crate::rng::{tags, Rng};
use crate::tensor::{self, PoolIndices, Tensor};

pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 32;
pub const CLASSIFIER: &str = "classifier.weight";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    ConvSmall,
    Mlp,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::ConvSmall => "conv-small",
            Arch::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_shape: ImageShape,
    pub arch: Arch,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub sobel: bool,
    pub seed: u64,
    /// Width of the hidden layer of the `mlp` trunk.
    pub hidden_dim: usize,
    /// Per-channel standardization of the network input (after Sobel).
    /// Empty means no standardization.
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

impl EncoderConfig {
    pub fn new(
        input_shape: ImageShape,
        arch: Arch,
        embedding_dim: usize,
        num_classes: usize,
    ) -> Self {
        EncoderConfig {
            input_shape,
            arch,
            embedding_dim,
            num_classes,
            sobel: false,
            seed: 0,
            hidden_dim: 128,
            channel_mean: Vec::new(),
            channel_std: Vec::new(),
        }
    }

    /// Channels seen by the first layer.
    pub fn net_channels(&self) -> usize {
        if self.sobel {
            2
        } else {
            self.input_shape.channels
        }
    }

    pub fn net_input_shape(&self) -> ImageShape {
        ImageShape::new(
            self.net_channels(),
            self.input_shape.height,
            self.input_shape.width,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.input_shape;
        if s.channels == 0 || s.height == 0 || s.width == 0 {
            return Err(Error::Config(format!(
                "input shape {s:?} has a zero extent"
            )));
        }
        if self.sobel && !matches!(s.channels, 1 | 3) {
            return Err(Error::Config(format!(
                "sobel needs 1 or 3 input channels, got {}",
                s.channels
            )));
        }
        if self.embedding_dim < 2 {
            return Err(Error::Config("embedding_dim must be >= 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("k >= 2 required (num_classes)".into()));
        }
        match self.arch {
            Arch::ConvSmall => {
                if s.height < 8 || s.width < 8 {
                    return Err(Error::Config(format!(
                        "conv-small needs input extents >= 8, got {}×{}",
                        s.height, s.width
                    )));
                }
            }
            Arch::Mlp => {
                if self.hidden_dim == 0 {
                    return Err(Error::Config("hidden_dim must be positive".into()));
                }
            }
        }
        let c = self.net_channels();
        let norm_ok = (self.channel_mean.is_empty() && self.channel_std.is_empty())
            || (self.channel_mean.len() == c
                && self.channel_std.len() == c
                && self.channel_std.iter().all(|&v| v > 0.0 && v.is_finite()));
        if !norm_ok {
            return Err(Error::Config(format!(
                "channel_mean/channel_std must both be empty or hold {c} entries with positive std"
            )));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<Layer> {
        let c = self.net_channels();
        let (h, w) = (self.input_shape.height, self.input_shape.width);
        let d = self.embedding_dim;
        match self.arch {
            Arch::ConvSmall => {
                let flat = CONV2_CHANNELS * (h / 4) * (w / 4);
                vec![
                    Layer::Conv {
                        param: 0,
                        cin: c,
                        cout: CONV1_CHANNELS,
                    },
                    Layer::Relu,
                    Layer::Pool,
                    Layer::Conv {
                        param: 1,
                        cin: CONV1_CHANNELS,
                        cout: CONV2_CHANNELS,
                    },
                    Layer::Relu,
                    Layer::Pool,
                    Layer::Flatten,
                    Layer::Affine {
                        param: 2,
                        din: flat,
                        dout: d,
                    },
                    Layer::Relu,
                ]
            }
            Arch::Mlp => vec![
                Layer::Flatten,
                Layer::Affine {
                    param: 0,
                    din: c * h * w,
                    dout: self.hidden_dim,
                },
                Layer::Relu,
                Layer::Affine {
                    param: 1,
                    din: self.hidden_dim,
                    dout: d,
                },
                Layer::Relu,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Layer {
    Conv {
        param: usize,
        cin: usize,
        cout: usize,
    },
    Affine {
        param: usize,
        din: usize,
        dout: usize,
    },
    Relu,
    Pool,
    Flatten,
}

fn weight_name(param: usize) -> String {
    format!("layer{param}.weight")
}

fn bias_name(param: usize) -> String {
    format!("layer{param}.bias")
}

fn glorot(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-a, a)).collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

fn classifier_init(config: &EncoderConfig, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed).derive(&[tags::CLASSIFIER_INIT]);
    glorot(
        &mut rng,
        &[config.embedding_dim, config.num_classes],
        config.embedding_dim,
        config.num_classes,
    )
}

/// Trainable state of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    config: EncoderConfig,
    params: ParamSet,
}

impl EncoderState {
    /// Glorot-uniform weights (`a = sqrt(6 / (fan_in + fan_out))`), zero
    /// biases, zero gradients and velocities. Bit-identical for equal seeds.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let root = Rng::new(config.seed);
        for layer in config.layers() {
            match layer {
                Layer::Conv { param, cin, cout } => {
                    let mut rng = root.derive(&[param as u64]);
                    params.insert(
                        weight_name(param),
                        glorot(&mut rng, &[cout, cin, 3, 3], cin * 9, cout * 9),
                    )?;
                    params.insert(bias_name(param), Tensor::zeros(&[cout]))?;
                }
                Layer::Affine { param, din, dout } => {
                    let mut rng = root.derive(&[param as u64]);
                    params.insert(
                        weight_name(param),
                        glorot(&mut rng, &[din, dout], din, dout),
                    )?;
                    params.insert(bias_name(param), Tensor::zeros(&[dout]))?;
                }
                _ => {}
            }
        }
        params.insert(CLASSIFIER, classifier_init(&config, config.seed))?;
        Ok(EncoderState { config, params })
    }

    /// Rebuild a state from stored parameters, checking every name and shape
    /// against what `config` expects.
    pub fn from_params(config: EncoderConfig, stored: ParamSet) -> Result<Self> {
        let fresh = EncoderState::init(config.clone())?;
        for expected in fresh.params.iter() {
            let got = stored
                .get(&expected.name)
                .ok_or_else(|| Error::Shape(format!("tensor {:?} missing", expected.name)))?;
            if got.value.shape() != expected.value.shape() {
                return Err(Error::Shape(format!(
                    "tensor {:?}: expected {:?}, found {:?}",
                    expected.name,
                    expected.value.shape(),
                    got.value.shape()
                )));
            }
        }
        if stored.len() != fresh.params.len() {
            let extra = stored
                .iter()
                .find(|p| fresh.params.get(&p.name).is_none())
                .map(|p| p.name.clone())
                .unwrap_or_default();
            return Err(Error::Shape(format!("unexpected tensor {extra:?}")));
        }
        let mut params = ParamSet::new();
        for expected in fresh.params.iter() {
            let got = stored.get(&expected.name).expect("checked above");
            params.insert(expected.name.clone(), got.value.clone())?;
        }
        Ok(EncoderState { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Fresh seeded classifier weights; momentum of the classifier is reset.
    pub fn reinit_classifier(&mut self, seed: u64) {
        let w = classifier_init(&self.config, seed);
        let p = self.params.get_mut(CLASSIFIER).expect("classifier present");
        p.value = w;
        p.grad.data_mut().fill(0.0);
        p.velocity.data_mut().fill(0.0);
    }

    /// Sobel (optional) and standardization of one raw image.
    pub fn preprocess_into(&self, image: &[f64], out: &mut [f64]) {
        preprocess_into(&self.config, image, out)
    }

    /// Embeddings (N×d) and logits (N×k) of raw images N×C×H×W.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let cache = forward_cached(&self.config, &self.params, batch)?;
        Ok((cache.embedding, cache.logits))
    }

    /// Logits only; same values as [`EncoderState::forward`].
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch)?.1)
    }

    /// Summed cross-entropy over `batch`, gradients of `scale × loss` and the
    /// per-sample argmax of the logits from the same forward pass.
    pub fn loss_and_grads(
        &self,
        batch: &Tensor,
        targets: &[usize],
        scale: f64,
    ) -> Result<BatchGrads> {
        batch_grads(&self.config, &self.params, batch, targets, scale)
    }
}

/// Output of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub loss_sum: f64,
    /// Aligned with the parameter order of the encoder's [`ParamSet`].
    pub grads: Vec<Tensor>,
    pub argmax: Vec<usize>,
    pub fingerprint: u64,
}

pub(crate) fn preprocess_into(config: &EncoderConfig, image: &[f64], out: &mut [f64]) {
    let s = config.input_shape;
    if config.sobel {
        sobel_into(image, s, out);
    } else {
        out.copy_from_slice(image);
    }
    if !config.channel_mean.is_empty() {
        let hw = s.height * s.width;
        for (c, plane) in out.chunks_exact_mut(hw).enumerate() {
            let (m, sd) = (config.channel_mean[c], config.channel_std[c]);
            plane.iter_mut().for_each(|v| *v = (*v - m) / sd);
        }
    }
}

fn preprocess_batch(config: &EncoderConfig, batch: &Tensor) -> Result<Tensor> {
    let s = config.input_shape;
    if batch.shape().len() != 4 || batch.shape()[1..] != [s.channels, s.height, s.width] {
        return Err(Error::invalid(format!(
            "batch shape {:?} does not match encoder input {}×{}×{}",
            batch.shape(),
            s.channels,
            s.height,
            s.width
        )));
    }
    let n = batch.rows();
    let net = config.net_input_shape();
    let mut out = Tensor::zeros(&[n, net.channels, net.height, net.width]);
    for i in 0..n {
        preprocess_into(config, batch.row(i), out.row_mut(i));
    }
    Ok(out)
}

struct Cache {
    /// `acts[l]` is the input of layer `l`; the last entry is the embedding.
    acts: Vec<Tensor>,
    pools: Vec<Option<PoolIndices>>,
    embedding: Tensor,
    logits: Tensor,
}

fn param<'a>(params: &'a ParamSet, name: &str) -> Result<&'a Tensor> {
    params
        .get(name)
        .map(|p| &p.value)
        .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
}

fn forward_cached(config: &EncoderConfig, params: &ParamSet, batch: &Tensor) -> Result<Cache> {
    let input = preprocess_batch(config, batch)?;
    let layers = config.layers();
    let mut acts = Vec::with_capacity(layers.len() + 1);
    let mut pools = Vec::with_capacity(layers.len());
    acts.push(input);
    for layer in &layers {
        let x = acts.last().expect("non-empty");
        let (y, pool) = match *layer {
            Layer::Conv { param: p, .. } => (
                tensor::conv3x3_forward(
                    x,
                    param(params, &weight_name(p))?,
                    param(params, &bias_name(p))?,
                )?,
                None,
            ),
            Layer::Affine { param: p, .. } => (
                tensor::affine_forward(
                    x,
                    param(params, &weight_name(p))?,
                    Some(param(params, &bias_name(p))?),
                )?,
                None,
            ),
            Layer::Relu => (tensor::relu_forward(x), None),
            Layer::Pool => {
                let (y, idx) = tensor::maxpool2_forward(x)?;
                (y, Some(idx))
            }
            Layer::Flatten => {
                let n = x.rows();
                let w = x.row_len();
                (x.clone().reshape(&[n, w])?, None)
            }
        };
        acts.push(y);
        pools.push(pool);
    }
    let embedding = acts.last().expect("non-empty").clone();
    let logits = tensor::affine_forward(&embedding, param(params, CLASSIFIER)?, None)?;
    Ok(Cache {
        acts,
        pools,
        embedding,
        logits,
    })
}

fn fingerprint(cache: &Cache) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut mix = |v: u64| h = (h ^ v).wrapping_mul(0x0100_0000_01b3);
    for (l, act) in cache.acts.iter().enumerate().skip(1) {
        if let Some(Some(p)) = cache.pools.get(l - 1) {
            mix(p.fingerprint());
        }
        let mut word = 0u64;
        for (i, &v) in act.data().iter().enumerate() {
            word = (word << 1) | u64::from(v > 0.0);
            if i % 64 == 63 {
                mix(word);
                word = 0;
            }
        }
        mix(word);
    }
    h
}

fn backward(
    config: &EncoderConfig,
    params: &ParamSet,
    cache: &Cache,
    dlogits: &Tensor,
) -> Result<Vec<Tensor>> {
    let mut grads: Vec<Option<Tensor>> = vec![None; params.len()];
    let idx = |name: &str| {
        params
            .index_of(name)
            .ok_or_else(|| Error::Internal(format!("missing parameter {name}")))
    };

    let cls = tensor::affine_backward(&cache.embedding, param(params, CLASSIFIER)?, dlogits)?;
    grads[idx(CLASSIFIER)?] = Some(cls.dw);
    let mut upstream = cls.dx;

    let layers = config.layers();
    for (l, layer) in layers.iter().enumerate().rev() {
        let x = &cache.acts[l];
        let needs_dx = l > 0;
        upstream = match *layer {
            Layer::Conv { param: p, .. } => {
                let g = tensor::conv3x3_backward(x, param(params, &weight_name(p))?, &upstream)?;
                grads[idx(&weight_name(p))?] = Some(g.dweight);
                grads[idx(&bias_name(p))?] = Some(g.dbias);
                g.dx
            }
            Layer::Affine { param: p, .. } => {
                let g = tensor::affine_backward(x, param(params, &weight_name(p))?, &upstream)?;
                grads[idx(&weight_name(p))?] = Some(g.dw);
                grads[idx(&bias_name(p))?] = Some(g.db);
                g.dx
            }
            Layer::Relu => tensor::relu_backward(&cache.acts[l + 1], &upstream)?,
            Layer::Pool => {
                let pool = cache.pools[l]
                    .as_ref()
                    .ok_or_else(|| Error::Internal("pool indices missing".into()))?;
                tensor::maxpool2_backward(pool, &upstream)?
            }
            Layer::Flatten => upstream.reshape(x.shape())?,
        };
        if !needs_dx {
            break;
        }
    }
    grads
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            g.ok_or_else(|| Error::Internal(format!("no gradient for {}", params.param(i).name)))
        })
        .collect()
}

pub(crate) fn batch_grads(
    config: &EncoderConfig,
    params: &ParamSet,
    batch: &Tensor,
    targets: &[usize],
    scale: f64,
) -> Result<BatchGrads> {
    let cache = forward_cached(config, params, batch)?;
    let (loss_sum, dlogits) = tensor::cross_entropy_batch(&cache.logits, targets, scale)?;
    let grads = backward(config, params, &cache, &dlogits)?;
    let argmax = (0..cache.logits.rows())
        .map(|i| tensor::argmax(cache.logits.row(i)))
        .collect();
    Ok(BatchGrads {
        loss_sum,
        grads,
        argmax,
        fingerprint: fingerprint(&cache),
    })
}

/// Mean cross-entropy of `batch` against `targets` at the values in
/// `params`, with gradients written into `params`' grad buffers. This is the
/// closure body handed to [`crate::gradcheck::grad_check`].
pub fn evaluate_mean_loss(
    config: &EncoderConfig,
    params: &mut ParamSet,
    batch: &Tensor,
    targets: &[usize],
) -> Result<Evaluation> {
    let n = batch.rows() as f64;
    let out = batch_grads(config, params, batch, targets, 1.0 / n)?;
    for (p, g) in params.iter_mut().zip(out.grads) {
        p.grad.data_mut().copy_from_slice(g.data());
    }
    Ok(Evaluation {
        loss: out.loss_sum / n,
        fingerprint: out.fingerprint,
    })
}

// ---------------------------------------------------------------------------
// Sobel

/// Horizontal and vertical Sobel responses (cross-correlation, replicated
/// borders) of the image luminance. Writes 2×H×W values into `out`.
pub(crate) fn sobel_into(image: &[f64], shape: ImageShape, out: &mut [f64]) {
    let (h, w) = (shape.height, shape.width);
    let hw = h * w;
    let gray: Vec<f64> = if shape.channels == 3 {
        (0..hw)
            .map(|p| 0.299 * image[p] + 0.587 * image[hw + p] + 0.114 * image[2 * hw + p])
            .collect()
    } else {
        image[..hw].to_vec()
    };
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray[yy * w + xx]
    };
    let (gx, gy) = out.split_at_mut(hw);
    // written as differences of weighted sums so flat regions give exact zeros
    let smooth = |a: f64, b: f64, c: f64| a + 2.0 * b + c;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let left = smooth(at(y - 1, x - 1), at(y, x - 1), at(y + 1, x - 1));
            let right = smooth(at(y - 1, x + 1), at(y, x + 1), at(y + 1, x + 1));
            let top = smooth(at(y - 1, x - 1), at(y - 1, x), at(y - 1, x + 1));
            let bottom = smooth(at(y + 1, x - 1), at(y + 1, x), at(y + 1, x + 1));
            gx[y as usize * w + x as usize] = right - left;
            gy[y as usize * w + x as usize] = bottom - top;
        }
    }
}

/// Sobel filter of a 1- or 3-channel C×H×W image; returns 2×H×W.
pub fn sobel_filter(image: &Tensor) -> Result<Tensor> {
    let shape = match image.shape() {
        [c @ (1 | 3), h, w] => ImageShape::new(*c, *h, *w),
        s => {
            return Err(Error::Shape(format!(
                "sobel expects a 1- or 3-channel C×H×W image, got {s:?}"
            )))
        }
    };
    let mut out = Tensor::zeros(&[2, shape.height, shape.width]);
    sobel_into(image.data(), shape, out.data_mut());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_config() -> EncoderConfig {
        EncoderConfig {
            sobel: true,
            seed: 11,
            ..EncoderConfig::new(ImageShape::new(1, 16, 16), Arch::ConvSmall, 64, 30)
        }
    }

    fn batch(n: usize, shape: ImageShape, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let data = (0..n * shape.len()).map(|_| rng.uniform()).collect();
        Tensor::from_vec(&[n, shape.channels, shape.height, shape.width], data).unwrap()
    }

    #[test]
    fn conv_small_shapes() {
        let enc = EncoderState::init(conv_config()).unwrap();
        let shapes: Vec<(String, Vec<usize>)> = enc
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        let expected: Vec<(&str, Vec<usize>)> = vec![
            ("layer0.weight", vec![16, 2, 3, 3]),
            ("layer0.bias", vec![16]),
            ("layer1.weight", vec![32, 16, 3, 3]),
            ("layer1.bias", vec![32]),
            ("layer2.weight", vec![512, 64]),
            ("layer2.bias", vec![64]),
            ("classifier.weight", vec![64, 30]),
        ];
        assert_eq!(shapes.len(), expected.len());
        for ((n, s), (en, es)) in shapes.iter().zip(&expected) {
            assert_eq!(n, en);
            assert_eq!(s, es);
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = EncoderState::init(conv_config()).unwrap();
        let b = EncoderState::init(conv_config()).unwrap();
        assert_eq!(a, b);
        let c = EncoderState::init(EncoderConfig {
            seed: 12,
            ..conv_config()
        })
        .unwrap();
        assert_ne!(a.params(), c.params());
        // glorot bound
        let w = &a.params().get("layer2.weight").unwrap().value;
        let bound = (6.0f64 / (512.0 + 64.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn invalid_configs() {
        let mut c = conv_config();
        c.num_classes = 1;
        assert!(EncoderState::init(c).is_err());
        let mut c = conv_config();
        c.input_shape = ImageShape::new(1, 6, 16);
        assert!(EncoderState::init(c).is_err());
        let mut c = conv_config();
        c.embedding_dim = 1;
        assert!(EncoderState::init(c).is_err());
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut enc = EncoderState::init(conv_config()).unwrap();
        enc.params_mut()
            .get_mut(CLASSIFIER)
            .unwrap()
            .value
            .data_mut()
            .fill(0.0);
        let logits = enc
            .logits(&batch(4, ImageShape::new(1, 16, 16), 3))
            .unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_independence() {
        for arch in [Arch::ConvSmall, Arch::Mlp] {
            let cfg = EncoderConfig {
                arch,
                ..conv_config()
            };
            let enc = EncoderState::init(cfg).unwrap();
            let b = batch(8, ImageShape::new(1, 16, 16), 5);
            let (emb, logits) = enc.forward(&b).unwrap();
            for i in 0..8 {
                let single = Tensor::from_vec(&[1, 1, 16, 16], b.row(i).to_vec()).unwrap();
                let (e1, l1) = enc.forward(&single).unwrap();
                for (a, b) in l1.data().iter().zip(logits.row(i)) {
                    assert!((a - b).abs() < 1e-12);
                }
                for (a, b) in e1.data().iter().zip(emb.row(i)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_shape_mismatch() {
        let enc = EncoderState::init(conv_config()).unwrap();
        let b = batch(2, ImageShape::new(3, 16, 16), 1);
        assert!(matches!(enc.forward(&b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn forward_is_bitwise_repeatable() {
        let enc = EncoderState::init(conv_config()).unwrap();
        let b = batch(3, ImageShape::new(1, 16, 16), 9);
        let (e1, l1) = enc.forward(&b).unwrap();
        let (e2, l2) = enc.forward(&b).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn sobel_constant_image() {
        let img = Tensor::from_vec(&[1, 6, 6], vec![0.7; 36]).unwrap();
        let out = sobel_filter(&img).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_vertical_edge() {
        let (h, w) = (6, 8);
        let data = (0..h * w)
            .map(|i| if i % w >= 4 { 1.0 } else { 0.0 })
            .collect();
        let img = Tensor::from_vec(&[1, h, w], data).unwrap();
        let out = sobel_filter(&img).unwrap();
        for y in 0..h {
            for x in 0..w {
                let gx = out.data()[y * w + x];
                let gy = out.data()[h * w + y * w + x];
                assert_eq!(gy, 0.0);
                if x == 3 || x == 4 {
                    assert_eq!(gx, 4.0);
                } else {
                    assert_eq!(gx, 0.0);
                }
            }
        }
    }

    #[test]
    fn sobel_ramp_by_hand() {
        // v(y, x) = x + 5y on a 5×5 grid, borders replicated.
        let data = (0..25).map(|i| ((i % 5) + 5 * (i / 5)) as f64).collect();
        let img = Tensor::from_vec(&[1, 5, 5], data).unwrap();
        let out = sobel_filter(&img).unwrap();
        // Interior: gx = (1+2+1)·(x+1 - (x-1)) = 8, gy = 4·(5·2) = 40.
        // Left/right border columns see a one-step difference: gx = 4.
        // Top/bottom rows likewise: gy = 20.
        for y in 0..5 {
            for x in 0..5 {
                let gx = out.data()[y * 5 + x];
                let gy = out.data()[25 + y * 5 + x];
                let ex = if x == 0 || x == 4 { 4.0 } else { 8.0 };
                let ey = if y == 0 || y == 4 { 20.0 } else { 40.0 };
                assert_eq!((gx, gy), (ex, ey), "at ({y}, {x})");
            }
        }
    }

    #[test]
    fn sobel_ignores_luminance_preserving_recoloring() {
        let mut rng = Rng::new(17);
        let (h, w) = (8, 8);
        let hw = h * w;
        let rgb: Vec<f64> = (0..3 * hw).map(|_| rng.uniform()).collect();
        // Add a chroma vector orthogonal to the luma weights at every pixel.
        let luma = [0.299, 0.587, 0.114];
        let u = [0.587, -0.299, 0.0];
        let v = [
            luma[1] * u[2] - luma[2] * u[1],
            luma[2] * u[0] - luma[0] * u[2],
            luma[0] * u[1] - luma[1] * u[0],
        ];
        let mut recolored = rgb.clone();
        for p in 0..hw {
            let (a, b) = (rng.uniform() - 0.5, rng.uniform() - 0.5);
            for c in 0..3 {
                recolored[c * hw + p] += 0.1 * (a * u[c] + b * v[c]);
            }
        }
        let cfg = EncoderConfig {
            sobel: true,
            ..EncoderConfig::new(ImageShape::new(3, h, w), Arch::ConvSmall, 8, 4)
        };
        let mut a = vec![0.0; 2 * hw];
        let mut b = vec![0.0; 2 * hw];
        preprocess_into(&cfg, &rgb, &mut a);
        preprocess_into(&cfg, &recolored, &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn from_params_reports_first_bad_tensor() {
        let conv = EncoderState::init(conv_config()).unwrap();
        let mlp_cfg = EncoderConfig {
            arch: Arch::Mlp,
            ..conv_config()
        };
        let err = EncoderState::from_params(mlp_cfg, conv.params().clone()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer0.weight"), "{msg}");
    }
}
