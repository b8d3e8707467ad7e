//! The distance network: a Siamese correlation encoder (or a stacked-input
//! variant) applied to every adjacent frame pair, a recurrent head over the
//! pair sequence, and a many-to-one readout into ordinal digits.

pub mod checkpoint;

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::DistanceCodec;
use crate::data::{normalize_image, render_sequence, SequenceSample, SynthConfig, PIXEL_MEANS};
use crate::error::{Error, Result};
use crate::nn::{self, correlation_channels, LstmParams, LstmVars};
use crate::rng::{stream, Purpose};
use crate::tensor::{conv_output_extent, Graph, Real, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Flownetc,
    Flownets,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Ordinal,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RnnCell {
    Bilstm,
    Lstm,
}

/// Output channels of every named encoder convolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Channels {
    pub conv_1: usize,
    pub conv_2: usize,
    pub conv_3: usize,
    pub conv_redir: usize,
    pub conv_3_1: usize,
    pub conv_4: usize,
    pub conv_4_1: usize,
    pub conv_5: usize,
    pub conv_5_1: usize,
    pub conv_6: usize,
    pub conv_6_1: usize,
}

impl Channels {
    pub fn full() -> Self {
        Channels {
            conv_1: 64,
            conv_2: 128,
            conv_3: 256,
            conv_redir: 32,
            conv_3_1: 256,
            conv_4: 512,
            conv_4_1: 512,
            conv_5: 512,
            conv_5_1: 512,
            conv_6: 1024,
            conv_6_1: 1024,
        }
    }

    /// Every width divided by `divisor` (at least 1).
    pub fn divided(divisor: usize) -> Self {
        let f = Self::full();
        let d = |c: usize| (c / divisor.max(1)).max(1);
        Channels {
            conv_1: d(f.conv_1),
            conv_2: d(f.conv_2),
            conv_3: d(f.conv_3),
            conv_redir: d(f.conv_redir),
            conv_3_1: d(f.conv_3_1),
            conv_4: d(f.conv_4),
            conv_4_1: d(f.conv_4_1),
            conv_5: d(f.conv_5),
            conv_5_1: d(f.conv_5_1),
            conv_6: d(f.conv_6),
            conv_6_1: d(f.conv_6_1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    /// Frames per window; the network sees `frames - 1` pairs.
    pub frames: usize,
    pub encoder: EncoderKind,
    pub channels: Channels,
    pub max_disp: usize,
    pub disp_stride: usize,
    pub leaky_slope: f64,
    pub rnn_cell: RnnCell,
    pub rnn_layers: usize,
    /// Cells per direction.
    pub hidden: usize,
    pub dropout: f64,
    /// Also apply dropout to the encoder features entering the recurrent head.
    pub encoder_dropout: bool,
    pub head: HeadKind,
    pub frozen: Vec<String>,
    pub codec: DistanceCodec,
    /// Rescale each encoder convolution after init so every output channel has
    /// zero mean and unit variance over a few seeded texture pairs.
    pub calibrate_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub const DEFAULT_FROZEN: [&str; 5] = ["conv_1", "conv_2", "conv_3", "conv_redir", "conv_3_1"];

impl ModelConfig {
    /// 768x256 input, full channel schedule, 800 cells per direction, K = 155.
    pub fn full() -> Self {
        ModelConfig {
            width: 768,
            height: 256,
            frames: 10,
            encoder: EncoderKind::Flownetc,
            channels: Channels::full(),
            max_disp: 20,
            disp_stride: 2,
            leaky_slope: 0.1,
            rnn_cell: RnnCell::Bilstm,
            rnn_layers: 2,
            hidden: 800,
            dropout: 0.3,
            encoder_dropout: false,
            head: HeadKind::Ordinal,
            frozen: DEFAULT_FROZEN.iter().map(|s| s.to_string()).collect(),
            codec: DistanceCodec::default(),
            calibrate_init: true,
        }
    }

    /// 128x64 input, quarter channels, 64 cells per direction, K = 31 over 3.1 m.
    pub fn desk() -> Self {
        ModelConfig {
            width: 128,
            height: 64,
            channels: Channels::divided(4),
            max_disp: 4,
            disp_stride: 1,
            hidden: 64,
            codec: DistanceCodec { k: 31, d_max: 3.1, threshold: 0.5 },
            ..Self::full()
        }
    }

    pub fn pairs(&self) -> usize {
        self.frames.saturating_sub(1)
    }

    fn plan(&self) -> EncoderPlan {
        let ch = &self.channels;
        let conv = |name: &'static str, input, output, kernel, stride| ConvLayer {
            name,
            input,
            output,
            kernel,
            stride,
            padding: kernel / 2,
        };
        let tail = |first_input| {
            vec![
                conv("conv_3_1", first_input, ch.conv_3_1, 3, 1),
                conv("conv_4", ch.conv_3_1, ch.conv_4, 3, 2),
                conv("conv_4_1", ch.conv_4, ch.conv_4_1, 3, 1),
                conv("conv_5", ch.conv_4_1, ch.conv_5, 3, 2),
                conv("conv_5_1", ch.conv_5, ch.conv_5_1, 3, 1),
                conv("conv_6", ch.conv_5_1, ch.conv_6, 3, 2),
                conv("conv_6_1", ch.conv_6, ch.conv_6_1, 3, 1),
            ]
        };
        match self.encoder {
            EncoderKind::Flownetc => {
                let corr = correlation_channels(self.max_disp, self.disp_stride);
                EncoderPlan {
                    trunk: vec![
                        conv("conv_1", 3, ch.conv_1, 7, 2),
                        conv("conv_2", ch.conv_1, ch.conv_2, 5, 2),
                        conv("conv_3", ch.conv_2, ch.conv_3, 5, 2),
                    ],
                    redir: Some(conv("conv_redir", ch.conv_3, ch.conv_redir, 1, 1)),
                    tail: tail(ch.conv_redir + corr),
                }
            }
            EncoderKind::Flownets => {
                let mut t = vec![
                    conv("conv_1", 6, ch.conv_1, 7, 2),
                    conv("conv_2", ch.conv_1, ch.conv_2, 5, 2),
                    conv("conv_3", ch.conv_2, ch.conv_3, 5, 2),
                ];
                t.extend(tail(ch.conv_3));
                EncoderPlan { trunk: Vec::new(), redir: None, tail: t }
            }
        }
    }

    /// Names of every parameterized layer in forward order.
    pub fn layer_names(&self) -> Vec<String> {
        let plan = self.plan();
        let mut names: Vec<String> = plan.trunk.iter().chain(&plan.redir).chain(&plan.tail).map(|l| l.name.to_string()).collect();
        names.extend((1..=self.rnn_layers).map(|l| format!("rnn_{l}")));
        names.push("head".into());
        names
    }

    /// `(channels, height, width)` of the final encoder map.
    pub fn encoder_grid(&self) -> Result<(usize, usize, usize)> {
        let plan = self.plan();
        let (mut h, mut w) = (self.height, self.width);
        let mut c = 0;
        let step = |l: &ConvLayer, h: &mut usize, w: &mut usize| -> Result<()> {
            let nh = conv_output_extent(*h, l.kernel, l.stride, l.padding).filter(|&v| v >= 1);
            let nw = conv_output_extent(*w, l.kernel, l.stride, l.padding).filter(|&v| v >= 1);
            match (nh, nw) {
                (Some(a), Some(b)) => {
                    *h = a;
                    *w = b;
                    Ok(())
                }
                _ => Err(Error::config(format!("layer {} would produce a feature map smaller than 1x1 (input {}x{})", l.name, w, h))),
            }
        };
        for l in &plan.trunk {
            step(l, &mut h, &mut w)?;
            c = l.output;
        }
        for l in &plan.tail {
            step(l, &mut h, &mut w)?;
            c = l.output;
        }
        Ok((c, h, w))
    }

    pub fn feature_width(&self) -> Result<usize> {
        let (c, h, w) = self.encoder_grid()?;
        Ok(c * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("input resolution must be positive"));
        }
        if self.frames < 2 {
            return Err(Error::config("a window needs at least 2 frames"));
        }
        if self.disp_stride == 0 {
            return Err(Error::config("disp_stride must be positive"));
        }
        if self.rnn_layers == 0 || self.hidden == 0 {
            return Err(Error::config("the recurrent head needs at least one layer and one cell"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.codec.validate()?;
        self.encoder_grid()?;
        let names = self.layer_names();
        for f in &self.frozen {
            if !names.contains(f) {
                return Err(Error::config(format!("frozen layer {f:?} does not exist (layers: {})", names.join(", "))));
            }
        }
        Ok(())
    }

    fn rnn_input(&self, layer: usize) -> Result<usize> {
        if layer == 0 {
            self.feature_width()
        } else {
            Ok(self.rnn_output())
        }
    }

    fn rnn_output(&self) -> usize {
        match self.rnn_cell {
            RnnCell::Bilstm => 2 * self.hidden,
            RnnCell::Lstm => self.hidden,
        }
    }

    pub fn output_width(&self) -> usize {
        match self.head {
            HeadKind::Ordinal => self.codec.k,
            HeadKind::Regression => 1,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    name: &'static str,
    input: usize,
    output: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

/// `trunk` runs on single frames, `redir` on the first frame's trunk output,
/// `tail` on per-pair inputs.
struct EncoderPlan {
    trunk: Vec<ConvLayer>,
    redir: Option<ConvLayer>,
    tail: Vec<ConvLayer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Recurrent,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub layer: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn frozen(&self) -> bool {
        !self.tensor.requires_grad()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    training: bool,
}

/// What the encoder starts from for a batch of windows.
pub enum BatchInput<'a, T> {
    /// Raw normalized frames, one slice of `frames` tensors per window.
    Frames(Vec<&'a [Tensor<T>]>),
    /// Outputs of [`Model::prefix_features`], `[pairs, C, h, w]` per window.
    Prefix(Vec<&'a Tensor<T>>),
}

impl<T> BatchInput<'_, T> {
    pub fn len(&self) -> usize {
        match self {
            BatchInput::Frames(v) => v.len(),
            BatchInput::Prefix(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Result of a recorded forward pass.
pub struct ForwardPass {
    /// `[B, K]` digit probabilities, or `[B, 1]` distances for the regression head.
    pub output: Var,
    /// Tape leaf of every parameter, aligned with [`Model::params`].
    pub params: Vec<Var>,
}

fn kaiming_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, slope: f64, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

fn fan_in_uniform<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}

/// Texture pairs used by [`ModelConfig::calibrate_init`].
const CALIBRATION_PAIRS: usize = 8;

trait CalibrationTarget {
    fn rescale(&mut self, weight: usize, bias: usize, rows: std::ops::Range<usize>, channel: usize, scale: f64, shift: f64);
}

impl<T: Real> CalibrationTarget for Model<T> {
    fn rescale(&mut self, weight: usize, bias: usize, rows: std::ops::Range<usize>, channel: usize, scale: f64, shift: f64) {
        for w in &mut self.params[weight].tensor.data_mut()[rows] {
            *w = T::lit(w.as_f64() * scale);
        }
        let b = &mut self.params[bias].tensor.data_mut()[channel];
        *b = T::lit(b.as_f64() * scale + shift);
    }
}

impl<T: Real> Model<T> {
    /// Initializes every parameter from the `init` stream of `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Purpose::Init, &[]);
        let plan = config.plan();
        let mut params = Vec::new();
        let mut push = |name: String, layer: &str, group, tensor: Tensor<T>| {
            params.push(Param { name, layer: layer.to_string(), group, tensor: tensor.with_grad(true) });
        };
        for l in plan.trunk.iter().chain(&plan.redir).chain(&plan.tail) {
            let fan_in = l.input * l.kernel * l.kernel;
            let w = kaiming_uniform(&[l.output, l.input, l.kernel, l.kernel], fan_in, config.leaky_slope, &mut rng);
            push(format!("{}.weight", l.name), l.name, ParamGroup::Encoder, w);
            push(format!("{}.bias", l.name), l.name, ParamGroup::Encoder, Tensor::zeros(&[l.output]));
        }
        for layer in 0..config.rnn_layers {
            let name = format!("rnn_{}", layer + 1);
            let input = config.rnn_input(layer)?;
            let dirs: &[&str] = match config.rnn_cell {
                RnnCell::Bilstm => &["fwd", "bwd"],
                RnnCell::Lstm => &["fwd"],
            };
            for dir in dirs {
                let p = LstmParams::<T>::init(input, config.hidden, &mut rng);
                push(format!("{name}.{dir}.input_weights"), &name, ParamGroup::Recurrent, p.input_weights);
                push(format!("{name}.{dir}.recurrent_weights"), &name, ParamGroup::Recurrent, p.recurrent_weights);
                push(format!("{name}.{dir}.bias"), &name, ParamGroup::Recurrent, p.bias);
            }
        }
        let (k, d) = (config.output_width(), config.rnn_output());
        push("head.weight".into(), "head", ParamGroup::Head, fan_in_uniform(&[k, d], d, &mut rng));
        push("head.bias".into(), "head", ParamGroup::Head, fan_in_uniform(&[k], d, &mut rng));
        let mut model = Model { params, config, training: false };
        if model.config.calibrate_init {
            model.calibrate_encoder(seed)?;
        }
        let frozen = model.config.frozen.clone();
        model.freeze_layers(&frozen)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen()).map(|p| p.tensor.numel()).sum()
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Replaces the frozen set: listed layers stop receiving optimizer
    /// updates, every other layer becomes trainable.
    pub fn freeze_layers<S: AsRef<str>>(&mut self, names: &[S]) -> Result<()> {
        let known = self.config.layer_names();
        let set: BTreeSet<&str> = names.iter().map(|s| s.as_ref()).collect();
        if let Some(bad) = set.iter().find(|n| !known.iter().any(|k| k == *n)) {
            return Err(Error::config(format!("cannot freeze unknown layer {bad:?}")));
        }
        for p in &mut self.params {
            p.tensor.set_requires_grad(!set.contains(p.layer.as_str()));
        }
        self.config.frozen = known.into_iter().filter(|k| set.contains(k.as_str())).collect();
        Ok(())
    }

    /// Number of leading tail layers whose output can be precomputed, or
    /// `None` when some per-frame layer is still trainable.
    pub fn prefix_depth(&self) -> Option<usize> {
        let plan = self.config.plan();
        let frozen = |name: &str| self.config.frozen.iter().any(|f| f == name);
        if !plan.trunk.iter().chain(&plan.redir).all(|l| frozen(l.name)) {
            return None;
        }
        Some(plan.tail.iter().take_while(|l| frozen(l.name)).count())
    }

    /// Data-dependent init: in execution order, each encoder convolution is
    /// rescaled and its bias shifted so that every output channel has zero
    /// mean and unit variance over a few texture pairs drawn from `seed`.
    fn calibrate_encoder(&mut self, seed: u64) -> Result<()> {
        let (w, h) = (self.config.width, self.config.height);
        let synth = SynthConfig { width: w, height: h, frames: 2, seed, ..SynthConfig::default() };
        let windows = (0..CALIBRATION_PAIRS)
            .map(|id| render_sequence(&synth, id).1.iter().map(|im| normalize_image::<f64>(im, PIXEL_MEANS, (w, h))).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<&[Tensor<f64>]> = windows.iter().map(Vec::as_slice).collect();
        let mut pair = Model::<f64> {
            config: ModelConfig { frames: 2, ..self.config.clone() },
            params: self.params.iter().map(|p| Param { name: p.name.clone(), layer: p.layer.clone(), group: p.group, tensor: p.tensor.cast() }).collect(),
            training: false,
        };
        let plan = self.config.plan();
        let layers: Vec<&ConvLayer> = plan.trunk.iter().chain(&plan.redir).chain(&plan.tail).collect();
        for (k, l) in layers.iter().enumerate() {
            let mut g = Graph::new();
            let vars = pair.record_params(&mut g);
            let x = pair.encode_head(&mut g, &vars, &batch, 0)?;
            pair.encode_tail(&mut g, &vars, x, 0)?;
            let z = g.vars_with_op("conv2d")[k];
            let shape = g.shape(z).to_vec();
            let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
            let v = g.value(z);
            let wi = self.params.iter().position(|p| p.name == format!("{}.weight", l.name)).expect("parameter exists by construction");
            let bi = wi + 1;
            let per_out = self.params[wi].tensor.numel() / c;
            for ch in 0..c {
                let vals = (0..n).flat_map(|i| &v[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
                let count = (n * hw) as f64;
                let mean = vals.clone().sum::<f64>() / count;
                let var = vals.map(|a| (a - mean).powi(2)).sum::<f64>() / count;
                if !(var.is_finite() && var > 1e-12) {
                    continue;
                }
                let inv = 1.0 / var.sqrt();
                let shift = -mean * inv;
                for m in [&mut pair as &mut dyn CalibrationTarget, self as &mut dyn CalibrationTarget] {
                    m.rescale(wi, bi, ch * per_out..(ch + 1) * per_out, ch, inv, shift);
                }
            }
        }
        Ok(())
    }

    fn record_params(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(&p.tensor)).collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        let i = self.params.iter().position(|p| p.name == name).expect("parameter exists by construction");
        vars[i]
    }

    fn conv(&self, g: &mut Graph<T>, vars: &[Var], l: &ConvLayer, x: Var) -> Result<Var> {
        let w = self.var(vars, &format!("{}.weight", l.name));
        let b = self.var(vars, &format!("{}.bias", l.name));
        let y = g.conv2d(x, w, Some(b), l.stride, l.padding)?;
        Ok(g.leaky_relu(y, T::lit(self.config.leaky_slope)))
    }

    /// Time-major stack of frames: row `f * B + b` is frame `f` of window `b`.
    fn stack_frames(&self, g: &mut Graph<T>, windows: &[&[Tensor<T>]]) -> Result<Var> {
        let c = &self.config;
        let expect = [3, c.height, c.width];
        for w in windows {
            if w.len() != c.frames {
                return Err(Error::contract(format!("window has {} frames, the model expects {}", w.len(), c.frames)));
            }
            if let Some(f) = w.iter().find(|f| f.shape() != expect) {
                return Err(Error::dim("encoder_forward", format!("frame shape {:?} does not match {expect:?}", f.shape())));
            }
        }
        let b = windows.len();
        let per = 3 * c.height * c.width;
        let mut data = Vec::with_capacity(c.frames * b * per);
        for f in 0..c.frames {
            for w in windows {
                data.extend_from_slice(w[f].data());
            }
        }
        g.constant(&[c.frames * b, 3, c.height, c.width], data)
    }

    /// Runs the encoder from raw frames up to (excluding) tail layer `depth`.
    /// Output is `[pairs * B, C, h, w]`, time-major.
    fn encode_head(&self, g: &mut Graph<T>, vars: &[Var], windows: &[&[Tensor<T>]], depth: usize) -> Result<Var> {
        let plan = self.config.plan();
        let b = windows.len();
        let pairs = self.config.pairs();
        let mut x = self.stack_frames(g, windows)?;
        for l in &plan.trunk {
            x = self.conv(g, vars, l, x)?;
        }
        let first = g.narrow(x, 0, 0, pairs * b)?;
        let second = g.narrow(x, 0, b, pairs * b)?;
        let mut x = match &plan.redir {
            Some(redir) => {
                let corr = nn::correlation(g, first, second, self.config.max_disp, self.config.disp_stride)?;
                let r = self.conv(g, vars, redir, first)?;
                g.concat(&[r, corr], 1)?
            }
            None => g.concat(&[first, second], 1)?,
        };
        for l in &plan.tail[..depth] {
            x = self.conv(g, vars, l, x)?;
        }
        Ok(x)
    }

    fn encode_tail(&self, g: &mut Graph<T>, vars: &[Var], mut x: Var, depth: usize) -> Result<Var> {
        let plan = self.config.plan();
        for l in &plan.tail[depth..] {
            x = self.conv(g, vars, l, x)?;
        }
        let rows = g.shape(x)[0];
        let width = g.value(x).len() / rows;
        g.reshape(x, &[rows, width])
    }

    /// Precomputes the frozen part of the encoder for one window:
    /// `[pairs, C, h, w]`. Fails when [`Model::prefix_depth`] is `None`.
    pub fn prefix_features(&self, frames: &[Tensor<T>]) -> Result<Tensor<T>> {
        let depth = self.prefix_depth().ok_or_else(|| Error::contract("per-frame encoder layers are trainable; nothing to precompute"))?;
        let mut g = Graph::new();
        let vars = self.record_params(&mut g);
        let x = self.encode_head(&mut g, &vars, &[frames], depth)?;
        Ok(g.tensor(x))
    }

    /// Flattened encoder features of one frame pair.
    pub fn encoder_forward(&self, frame_a: &Tensor<T>, frame_b: &Tensor<T>) -> Result<Tensor<T>> {
        let pair_model = Model { config: ModelConfig { frames: 2, ..self.config.clone() }, params: self.params.clone(), training: false };
        let mut g = Graph::new();
        let vars = pair_model.record_params(&mut g);
        let frames = [frame_a.clone(), frame_b.clone()];
        let x = pair_model.encode_head(&mut g, &vars, &[&frames], 0)?;
        let f = pair_model.encode_tail(&mut g, &vars, x, 0)?;
        let t = g.tensor(f);
        let n = t.numel();
        t.reshape(&[n])
    }

    fn encode(&self, g: &mut Graph<T>, vars: &[Var], input: &BatchInput<T>) -> Result<Var> {
        match input {
            BatchInput::Frames(windows) => {
                let x = self.encode_head(g, vars, windows, 0)?;
                self.encode_tail(g, vars, x, 0)
            }
            BatchInput::Prefix(cached) => {
                let depth = self.prefix_depth().ok_or_else(|| Error::contract("precomputed features given to a model with trainable per-frame layers"))?;
                let shape = cached[0].shape().to_vec();
                let pairs = self.config.pairs();
                if shape.len() != 4 || shape[0] != pairs || cached.iter().any(|t| t.shape() != shape.as_slice()) {
                    return Err(Error::dim("encoder_forward", format!("precomputed features must be [{pairs}, C, h, w], got {shape:?}")));
                }
                let per = cached[0].numel() / pairs;
                let mut data = Vec::with_capacity(per * pairs * cached.len());
                for t in 0..pairs {
                    for c in cached {
                        data.extend_from_slice(&c.data()[t * per..(t + 1) * per]);
                    }
                }
                let x = g.constant(&[pairs * cached.len(), shape[1], shape[2], shape[3]], data)?;
                self.encode_tail(g, vars, x, depth)
            }
        }
    }

    /// Records a batched forward pass. In training mode window `b` draws its
    /// dropout masks from `rngs[b]`.
    pub fn forward(&self, g: &mut Graph<T>, input: &BatchInput<T>, rngs: &mut [ChaCha8Rng]) -> Result<ForwardPass> {
        self.forward_mode(g, input, rngs, self.training, None)
    }

    /// Like [`Model::forward`] but parameter `index` is read from the
    /// already recorded `value` (used to differentiate with respect to one
    /// parameter tensor in isolation).
    pub fn forward_substituted(
        &self,
        g: &mut Graph<T>,
        input: &BatchInput<T>,
        rngs: &mut [ChaCha8Rng],
        index: usize,
        value: Var,
    ) -> Result<ForwardPass> {
        if g.shape(value) != self.params[index].tensor.shape() {
            return Err(Error::dim("forward", format!("substitute for {} has shape {:?}", self.params[index].name, g.shape(value))));
        }
        self.forward_mode(g, input, rngs, self.training, Some((index, value)))
    }

    fn forward_mode(
        &self,
        g: &mut Graph<T>,
        input: &BatchInput<T>,
        rngs: &mut [ChaCha8Rng],
        training: bool,
        substitute: Option<(usize, Var)>,
    ) -> Result<ForwardPass> {
        let b = input.len();
        if b == 0 {
            return Err(Error::contract("forward on an empty batch"));
        }
        let training = training && self.config.dropout > 0.0;
        if training && rngs.len() != b {
            return Err(Error::contract(format!("{} dropout streams for a batch of {b}", rngs.len())));
        }
        let mut vars = self.record_params(g);
        if let Some((i, v)) = substitute {
            vars[i] = v;
        }
        let feats = self.encode(g, &vars, input)?;
        let pairs = self.config.pairs();
        let rate = self.config.dropout;
        let mut seq = Vec::with_capacity(pairs);
        for t in 0..pairs {
            let mut x = g.narrow(feats, 0, t * b, b)?;
            if self.config.encoder_dropout {
                x = nn::dropout_rows(g, x, rate, training, rngs)?;
            }
            seq.push(x);
        }
        let lstm = |name: &str| LstmVars {
            input_weights: self.var(&vars, &format!("{name}.input_weights")),
            recurrent_weights: self.var(&vars, &format!("{name}.recurrent_weights")),
            bias: self.var(&vars, &format!("{name}.bias")),
            hidden: self.config.hidden,
        };
        for layer in 1..=self.config.rnn_layers {
            let fwd = lstm(&format!("rnn_{layer}.fwd"));
            seq = match self.config.rnn_cell {
                RnnCell::Bilstm => {
                    let bwd = lstm(&format!("rnn_{layer}.bwd"));
                    nn::bilstm_forward(g, &seq, &fwd, &bwd)?
                }
                RnnCell::Lstm => nn::lstm_forward(g, &seq, &fwd)?,
            };
            let last_layer = layer == self.config.rnn_layers;
            let from = if last_layer { pairs - 1 } else { 0 };
            for x in &mut seq[from..] {
                *x = nn::dropout_rows(g, *x, rate, training, rngs)?;
            }
        }
        let last = seq[pairs - 1];
        let w = self.var(&vars, "head.weight");
        let bias = self.var(&vars, "head.bias");
        let z = nn::linear(g, last, w, bias)?;
        let output = match self.config.head {
            HeadKind::Ordinal => g.logistic(z),
            HeadKind::Regression => g.softplus(z),
        };
        Ok(ForwardPass { output, params: vars })
    }

    /// Eval-mode prediction for one window: digit probabilities (ordinal head)
    /// or a single distance (regression head).
    pub fn predict(&self, sample: &SequenceSample<T>) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&BatchInput::Frames(vec![&sample.frames]))?.remove(0))
    }

    pub fn predict_batch(&self, input: &BatchInput<T>) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let fp = self.forward_mode(&mut g, input, &mut [], false, None)?;
        let width = self.config.output_width();
        let out = g.value(fp.output);
        Ok(out.chunks(width).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }

    /// Distance in meters and class (ordinal head only) from a raw output row.
    pub fn decode_output(&self, row: &[f64]) -> Result<(f64, Option<usize>)> {
        match self.config.head {
            HeadKind::Ordinal => {
                let (class, meters) = self.config.codec.decode(row)?;
                Ok((meters, Some(class)))
            }
            HeadKind::Regression => Ok((row[0], None)),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }
}

/// Per-window dropout streams for `epoch`.
pub fn dropout_streams(seed: u64, epoch: u64, ids: &[usize]) -> Vec<ChaCha8Rng> {
    ids.iter().map(|&id| stream(seed, Purpose::Dropout, &[epoch, id as u64])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleSource;
    use rand::SeedableRng;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig { width: 64, height: 32, channels: Channels::divided(16), max_disp: 2, hidden: 6, ..ModelConfig::desk() }
    }

    fn frames(cfg: &ModelConfig, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.frames).map(|_| Tensor::from_fn(&[3, cfg.height, cfg.width], |_| rng.gen_range(-0.5..0.5))).collect()
    }

    fn sample(cfg: &ModelConfig, seed: u64) -> SequenceSample<f64> {
        SequenceSample::new(frames(cfg, seed), 1.0, SampleSource { sequence: "t".into(), start: 0 }).unwrap()
    }

    #[test]
    fn grids() {
        assert_eq!(ModelConfig::full().encoder_grid().unwrap(), (1024, 4, 12));
        assert_eq!(ModelConfig::desk().encoder_grid().unwrap(), (256, 1, 2));
        assert_eq!(ModelConfig::full().codec.k, 155);
        let tiny = ModelConfig { width: 16, height: 8, ..ModelConfig::desk() };
        assert_eq!(tiny.encoder_grid().unwrap(), (256, 1, 1));
        let empty = ModelConfig { width: 0, ..ModelConfig::desk() };
        let err = empty.encoder_grid().unwrap_err();
        assert!(err.to_string().contains("conv_1"), "{err}");
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::<f64>::build(small_config(), 5).unwrap();
        let b = Model::<f64>::build(small_config(), 5).unwrap();
        let c = Model::<f64>::build(small_config(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
        let bias = a.param("rnn_1.fwd.bias").unwrap().tensor.data();
        assert!(bias[6..12].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn freezing() {
        let mut m = Model::<f64>::build(small_config(), 1).unwrap();
        assert!(m.param("conv_3_1.weight").unwrap().frozen());
        assert!(!m.param("conv_4.weight").unwrap().frozen());
        assert_eq!(m.prefix_depth(), Some(1));
        m.freeze_layers::<&str>(&[]).unwrap();
        assert!(m.params().iter().all(|p| !p.frozen()));
        assert_eq!(m.prefix_depth(), None);
        assert!(matches!(m.freeze_layers(&["conv_9"]), Err(Error::Config(_))));
        let s = ModelConfig { encoder: EncoderKind::Flownets, frozen: vec!["conv_redir".into()], ..small_config() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn outputs_are_probabilities() {
        let cfg = small_config();
        let m = Model::<f64>::build(cfg.clone(), 2).unwrap();
        let out = m.predict(&sample(&cfg, 1)).unwrap();
        assert_eq!(out.len(), 31);
        assert!(out.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(out, m.predict(&sample(&cfg, 1)).unwrap());
    }

    #[test]
    fn first_frame_matters() {
        let cfg = small_config();
        let m = Model::<f64>::build(cfg.clone(), 2).unwrap();
        let s = sample(&cfg, 1);
        let mut t = s.clone();
        t.frames[0].data_mut()[100] += 0.5;
        assert_ne!(m.predict(&s).unwrap(), m.predict(&t).unwrap());
    }

    #[test]
    fn encoder_is_order_sensitive() {
        let cfg = small_config();
        let m = Model::<f64>::build(cfg.clone(), 3).unwrap();
        let f = frames(&cfg, 4);
        let ab = m.encoder_forward(&f[0], &f[1]).unwrap();
        let ba = m.encoder_forward(&f[1], &f[0]).unwrap();
        assert_eq!(ab.numel(), cfg.feature_width().unwrap());
        assert_ne!(ab, ba);
        let same = m.encoder_forward(&f[0], &f[0]).unwrap();
        assert!(same.is_finite());
    }

    #[test]
    fn prefix_path_matches_frames_path() {
        let cfg = small_config();
        let m = Model::<f64>::build(cfg.clone(), 3).unwrap();
        let (a, b) = (sample(&cfg, 1), sample(&cfg, 2));
        let pa = m.prefix_features(&a.frames).unwrap();
        let pb = m.prefix_features(&b.frames).unwrap();
        let direct = m.predict_batch(&BatchInput::Frames(vec![&a.frames, &b.frames])).unwrap();
        let cached = m.predict_batch(&BatchInput::Prefix(vec![&pa, &pb])).unwrap();
        for (x, y) in direct.iter().flatten().zip(cached.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn variants_build_and_run() {
        let base = small_config();
        let variants = [
            ModelConfig { head: HeadKind::Regression, ..base.clone() },
            ModelConfig { rnn_cell: RnnCell::Lstm, ..base.clone() },
            ModelConfig { encoder: EncoderKind::Flownets, frozen: vec!["conv_1".into(), "conv_3_1".into()], ..base.clone() },
        ];
        for cfg in variants {
            let m = Model::<f64>::build(cfg.clone(), 1).unwrap();
            let out = m.predict(&sample(&cfg, 1)).unwrap();
            assert_eq!(out.len(), cfg.output_width());
            if cfg.head == HeadKind::Regression {
                assert!(out[0] >= 0.0);
            }
        }
    }

    #[test]
    fn wrong_frame_count_is_contract_error() {
        let cfg = small_config();
        let m = Model::<f64>::build(cfg.clone(), 1).unwrap();
        let mut s = sample(&cfg, 1);
        s.frames.pop();
        assert!(matches!(m.predict(&s), Err(Error::Contract(_))));
    }
}
