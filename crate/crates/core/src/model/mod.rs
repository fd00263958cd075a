//! The detection network: a small spatio-temporal convolutional encoder, a
//! classifier head (2D capsule routing or dense), and a per-frame localization
//! decoder with skip connections.

mod capsule;

use std::collections::BTreeMap;

use ndarray::{Array1, Array3, Array4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Tensor, Var};
use crate::{Error, Result};

pub use capsule::{route_capsules_2d, squash, CapsuleOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Dense,
    Capsule2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapsuleConfig {
    /// Primary capsule types per spatial location.
    pub primary_types: usize,
    pub primary_dim: usize,
    /// Dimension of each class capsule (one class capsule per class).
    pub class_dim: usize,
    pub routing_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// `(T, H, W)` of both the input clip and the localization map.
    pub output_size: [usize; 3],
    /// Spatial average-pooling factor applied to the input (a power of two).
    pub input_pool: usize,
    pub encoder_channels: Vec<usize>,
    pub temporal_kernel: usize,
    /// One entry per skip connection, deepest first.
    pub decoder_channels: Vec<usize>,
    pub head: HeadKind,
    pub capsules: CapsuleConfig,
    pub dense_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 5,
            output_size: [8, 64, 64],
            input_pool: 4,
            encoder_channels: vec![8, 16, 16],
            temporal_kernel: 3,
            decoder_channels: vec![16, 8],
            head: HeadKind::Capsule2d,
            capsules: CapsuleConfig {
                primary_types: 4,
                primary_dim: 8,
                class_dim: 8,
                routing_iters: 3,
            },
            dense_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.encoder_channels.is_empty() {
            return bad("encoder_channels must not be empty");
        }
        if self.decoder_channels.len() + 1 != self.encoder_channels.len() {
            return bad("decoder_channels needs exactly one entry per skip connection");
        }
        if self.temporal_kernel % 2 == 0 {
            return bad("temporal_kernel must be odd");
        }
        if !self.input_pool.is_power_of_two() {
            return bad("input_pool must be a power of two");
        }
        if self.capsules.routing_iters < 1 {
            return bad("routing_iters must be at least 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        let [t, h, w] = self.output_size;
        let factor = self.input_pool << (self.encoder_channels.len() - 1);
        if t < 2 || h % factor != 0 || w % factor != 0 {
            return bad("output_size must have T >= 2 and H, W divisible by the total pooling factor");
        }
        Ok(())
    }

    /// Width of the penultimate classifier activations.
    pub fn penultimate_dim(&self) -> usize {
        match self.head {
            HeadKind::Dense => self.dense_hidden,
            HeadKind::Capsule2d => self.capsules.primary_types * self.capsules.primary_dim,
        }
    }

    fn bottleneck_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated")
    }

    /// Parameter names and shapes, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let kt = self.temporal_kernel;
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for (i, &c) in self.encoder_channels.iter().enumerate() {
            out.push((format!("enc{i}.w"), vec![kt, 3, 3, cin, c]));
            out.push((format!("enc{i}.b"), vec![c]));
            cin = c;
        }
        let n_skip = self.decoder_channels.len();
        for (j, &c) in self.decoder_channels.iter().enumerate() {
            let skip_c = self.encoder_channels[n_skip - 1 - j];
            out.push((format!("dec{j}.w"), vec![1, 3, 3, cin + skip_c, c]));
            out.push((format!("dec{j}.b"), vec![c]));
            cin = c;
        }
        out.push(("out.w".into(), vec![1, 1, 1, cin, 1]));
        out.push(("out.b".into(), vec![1]));
        let cb = self.bottleneck_channels();
        let k = self.num_classes;
        match self.head {
            HeadKind::Dense => {
                out.push(("dense.w1".into(), vec![cb, self.dense_hidden]));
                out.push(("dense.b1".into(), vec![self.dense_hidden]));
                out.push(("dense.w2".into(), vec![self.dense_hidden, k]));
                out.push(("dense.b2".into(), vec![k]));
            }
            HeadKind::Capsule2d => {
                let cc = &self.capsules;
                out.push(("caps.primary.w".into(), vec![cb, cc.primary_types * cc.primary_dim]));
                out.push(("caps.primary.b".into(), vec![cc.primary_types * cc.primary_dim]));
                out.push((
                    "caps.route.w".into(),
                    vec![cc.primary_types, k, cc.primary_dim, cc.class_dim],
                ));
            }
        }
        out
    }
}

/// Named model parameters in a deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: BTreeMap<String, Tensor>,
}

/// Fan-based (Glorot) uniform bound for a weight of the given shape.
pub fn init_bound(name: &str, shape: &[usize]) -> f64 {
    let (fan_in, fan_out) = fans(name, shape);
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fans(name: &str, shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        5 => {
            let rf = shape[0] * shape[1] * shape[2];
            (rf * shape[3], rf * shape[4])
        }
        4 if name == "caps.route.w" => (shape[2], shape[3]),
        2 => (shape[0], shape[1]),
        _ => (1, 1),
    }
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
            vec![0.0; n]
        } else {
            let b = init_bound(&name, &shape);
            (0..n).map(|_| rng.random_range(-b..b)).collect()
        };
        tensors.insert(name, Tensor::from_shape_vec(IxDyn(&shape), data).expect("shape"));
    }
    Ok(Params { tensors })
}

impl Params {
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Registers every parameter on the tape, as leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }
}

pub struct BoundParams<'t> {
    pub vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

/// Differentiable outputs of one forward pass.
pub struct TapeOutput<'t> {
    /// `[K]` class confidences.
    pub class_scores: Var<'t>,
    /// `[D]` penultimate classifier activations.
    pub penultimate: Var<'t>,
    /// `[T, H, W]` localization probabilities.
    pub loc: Var<'t>,
}

/// Plain-value model output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub class_scores: Array1<f64>,
    pub penultimate: Array1<f64>,
    pub loc: Array3<f64>,
}

pub fn check_input(config: &ModelConfig, shape: &[usize]) -> Result<()> {
    let [t, h, w] = config.output_size;
    if shape != [t, h, w, config.in_channels] {
        return Err(Error::Shape(format!(
            "clip shape {shape:?} does not match model input [{t}, {h}, {w}, {}]",
            config.in_channels
        )));
    }
    Ok(())
}

/// Builds the forward graph for one clip `[T, H, W, C]` on the tape.
pub fn forward_on_tape<'t>(
    config: &ModelConfig,
    params: &BoundParams<'t>,
    input: Var<'t>,
) -> Result<TapeOutput<'t>> {
    check_input(config, &input.shape())?;
    let [t, h, w] = config.output_size;
    let mut x = input.add_scalar(-0.5);
    let mut f = config.input_pool;
    while f > 1 {
        x = x.avg_pool2();
        f /= 2;
    }

    let n_stages = config.encoder_channels.len();
    let mut skips = Vec::with_capacity(n_stages - 1);
    for i in 0..n_stages {
        x = x
            .conv3d(params.get(&format!("enc{i}.w")), params.get(&format!("enc{i}.b")))
            .relu();
        if i + 1 < n_stages {
            skips.push(x);
            x = x.avg_pool2();
        }
    }
    let bottleneck = x;

    for j in 0..config.decoder_channels.len() {
        let skip = skips[skips.len() - 1 - j];
        x = x
            .upsample2()
            .concat_last(skip)
            .conv3d(params.get(&format!("dec{j}.w")), params.get(&format!("dec{j}.b")))
            .relu();
    }
    let logits = x.conv3d(params.get("out.w"), params.get("out.b"));
    let loc = logits.resize_bilinear(h, w).reshape(&[t, h, w]).sigmoid();

    let s = bottleneck.shape();
    let (hb, wb, cb) = (s[1], s[2], s[3]);
    let pooled = bottleneck.mean_axis0().reshape(&[hb * wb, cb]);
    let (class_scores, penultimate) = match config.head {
        HeadKind::Dense => {
            let g = pooled.mean_axis0().reshape(&[1, cb]);
            let hidden = g
                .matmul(params.get("dense.w1"))
                .add_bias(params.get("dense.b1"))
                .relu();
            let scores = hidden
                .matmul(params.get("dense.w2"))
                .add_bias(params.get("dense.b2"))
                .sigmoid()
                .reshape(&[config.num_classes]);
            (scores, hidden.reshape(&[config.dense_hidden]))
        }
        HeadKind::Capsule2d => {
            let cc = &config.capsules;
            let primary = pooled
                .matmul(params.get("caps.primary.w"))
                .add_bias(params.get("caps.primary.b"));
            let penultimate = primary.mean_axis0();
            let poses = primary
                .reshape(&[hb * wb * cc.primary_types, cc.primary_dim])
                .squash();
            let routed = capsule::route_on_tape(poses, params.get("caps.route.w"), cc.routing_iters);
            (routed.class_caps.norm_last(), penultimate)
        }
    };
    Ok(TapeOutput {
        class_scores,
        penultimate,
        loc,
    })
}

/// Evaluation-mode forward pass on plain values.
pub fn forward(clip: &Array4<f64>, config: &ModelConfig, params: &Params) -> Result<ModelOutput> {
    check_input(config, clip.shape())?;
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let input = tape.constant(clip.clone().into_dyn());
    let out = forward_on_tape(config, &bound, input)?;
    let to1 = |v: Var<'_>| {
        v.value()
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("rank 1")
    };
    let loc = out.loc.value().clone();
    Ok(ModelOutput {
        class_scores: to1(out.class_scores),
        penultimate: to1(out.penultimate),
        loc: loc.into_dimensionality::<ndarray::Ix3>().expect("rank 3"),
    })
}
