//! CNN-d-k models: a stem layer followed by three stages of plain layers,
//! residual pairs or two-branch residual blocks, then global average
//! pooling and a dense classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{self, Activation, BNParams, Linear, Mode};
use crate::noise::{self, BlockClaims, BnLayer, NoiseSource, NoiseSpec, Scripted, ShakeConfig};
use crate::tensor::Tensor;

/// RNG stream used for parameter initialization.
pub const INIT_STREAM: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    PlainCnn,
    Residual,
    Residual2Branch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseType {
    None,
    Mn,
    WeightMn,
    Ncmn0,
    Ncmn1,
    Ncmn2,
    Shake,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::PlainCnn => "plain_cnn",
            Architecture::Residual => "residual",
            Architecture::Residual2Branch => "residual_2branch",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Architecture::PlainCnn, Architecture::Residual, Architecture::Residual2Branch]
            .into_iter()
            .find(|a| a.name() == s)
    }
}

impl NoiseType {
    pub const ALL: [NoiseType; 7] = [
        NoiseType::None,
        NoiseType::Mn,
        NoiseType::WeightMn,
        NoiseType::Ncmn0,
        NoiseType::Ncmn1,
        NoiseType::Ncmn2,
        NoiseType::Shake,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseType::None => "none",
            NoiseType::Mn => "mn",
            NoiseType::WeightMn => "weight_mn",
            NoiseType::Ncmn0 => "ncmn0",
            NoiseType::Ncmn1 => "ncmn1",
            NoiseType::Ncmn2 => "ncmn2",
            NoiseType::Shake => "shake",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Number of conv layers along the main path, stem included.
    pub depth: usize,
    /// Width multiplier `k`.
    pub width: usize,
    /// Channels of the first stage at `k = 1`.
    pub base_width: usize,
    pub input_channels: usize,
    pub class_count: usize,
    pub noise_type: NoiseType,
    pub noise: NoiseSpec,
    pub shake: ShakeConfig,
    /// Leave the stem layer noise-free.
    pub noise_skip_first: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::PlainCnn,
            depth: 8,
            width: 2,
            base_width: 4,
            input_channels: 3,
            class_count: 10,
            noise_type: NoiseType::None,
            noise: NoiseSpec::uniform(0.35),
            shake: ShakeConfig::default(),
            noise_skip_first: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.base_width == 0 || self.input_channels == 0 {
            return Err(Error::config("depth, width, base_width and input channels must be positive"));
        }
        if self.class_count < 2 {
            return Err(Error::config("class_count must be at least 2"));
        }
        self.noise.validate()?;
        let paired = self.architecture != Architecture::PlainCnn
            || matches!(self.noise_type, NoiseType::Ncmn2 | NoiseType::Shake);
        if paired && (self.depth < 3 || (self.depth - 1) % 2 != 0) {
            return Err(Error::config(format!(
                "{} with {} pairs the layers after the stem into blocks; depth {} leaves {} layers",
                self.architecture.name(),
                self.noise_type.name(),
                self.depth,
                self.depth.saturating_sub(1)
            )));
        }
        match (self.noise_type, self.architecture) {
            (NoiseType::Shake, a) if a != Architecture::Residual2Branch => Err(Error::config(
                "shake noise needs the residual_2branch architecture",
            )),
            (NoiseType::Ncmn2, Architecture::Residual2Branch) => Err(Error::config(
                "ncmn2 is defined for single-branch blocks",
            )),
            _ => Ok(()),
        }
    }

    fn stage_width(&self, stage: usize) -> usize {
        self.base_width * self.width << stage
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    weight: usize,
    /// `(gamma, beta)` indices; absent on the inner layer of a branch whose
    /// affine step is shared by the block.
    affine: Option<(usize, usize)>,
    stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum Block {
    Single(usize),
    Pair {
        layers: [usize; 2],
        shortcut: Option<Tensor>,
    },
    TwoBranch {
        layers: [[usize; 2]; 2],
        affine: (usize, usize),
        shortcut: Option<Tensor>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    bns: Vec<BNParams>,
    layers: Vec<ConvLayer>,
    blocks: Vec<Block>,
    classifier: (usize, usize),
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    /// One leaf per parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// `(spatial size, activation)` after batch normalization: every layer
    /// but the stem for plain models, every block output for residual ones.
    pub features: Vec<(usize, Var)>,
    /// `(layer, input)` for every conv layer evaluated one at a time.
    pub inputs: Vec<(usize, Var)>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
    layers: Vec<ConvLayer>,
}

impl Builder {
    fn param(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("length matches shape")
    }

    fn conv(&mut self, c_in: usize, c_out: usize, stride: usize, affine: bool) -> usize {
        let l = self.layers.len();
        let weight = self.he(&[c_out, c_in, 3, 3], c_in * 9);
        let weight = self.param(format!("layer{l}.weight"), weight);
        let affine = affine.then(|| {
            let g = self.param(format!("layer{l}.gamma"), Tensor::ones(&[c_out]));
            let b = self.param(format!("layer{l}.beta"), Tensor::zeros(&[c_out]));
            (g, b)
        });
        self.layers.push(ConvLayer { weight, affine, stride });
        l
    }
}

/// 1×1 stride-`s` kernel copying channel `i` to channel `i` and padding the
/// remaining output channels with zeros.
fn projection(c_in: usize, c_out: usize) -> Tensor {
    let mut k = Tensor::zeros(&[c_out, c_in, 1, 1]);
    for i in 0..c_in.min(c_out) {
        k.data_mut()[i * c_in + i] = 1.0;
    }
    k
}

/// Builds a model with He-initialized weights drawn from `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let mut b = Builder {
        rng,
        params: Vec::new(),
        layers: Vec::new(),
    };
    let mut blocks = Vec::new();

    let w0 = cfg.stage_width(0);
    blocks.push(Block::Single(b.conv(cfg.input_channels, w0, 1, true)));
    let units = match cfg.architecture {
        Architecture::PlainCnn => cfg.depth - 1,
        _ => (cfg.depth - 1) / 2,
    };
    let mut c = w0;
    for i in 0..units {
        let stage = i * 3 / units;
        let first_of_stage = i > 0 && stage != (i - 1) * 3 / units;
        let stride = if first_of_stage { 2 } else { 1 };
        let c_out = cfg.stage_width(stage);
        let shortcut = (stride != 1 || c_out != c).then(|| projection(c, c_out));
        let block = match cfg.architecture {
            Architecture::PlainCnn => Block::Single(b.conv(c, c_out, stride, true)),
            Architecture::Residual => {
                let l1 = b.conv(c, c_out, stride, true);
                let l2 = b.conv(c_out, c_out, 1, true);
                Block::Pair { layers: [l1, l2], shortcut }
            }
            Architecture::Residual2Branch => {
                let mut layers = [[0; 2]; 2];
                for branch in layers.iter_mut() {
                    branch[0] = b.conv(c, c_out, stride, true);
                    branch[1] = b.conv(c_out, c_out, 1, false);
                }
                let k = blocks.len();
                let g = b.param(format!("block{k}.gamma"), Tensor::ones(&[c_out]));
                let be = b.param(format!("block{k}.beta"), Tensor::zeros(&[c_out]));
                Block::TwoBranch { layers, affine: (g, be), shortcut }
            }
        };
        blocks.push(block);
        c = c_out;
    }

    let dist = Normal::new(0.0, (1.0 / c as f64).sqrt()).expect("positive std");
    let n = c * cfg.class_count;
    let w = (0..n).map(|_| dist.sample(&mut b.rng)).collect();
    let w = b.param("classifier.weight".into(), Tensor::new(&[c, cfg.class_count], w)?);
    let bias = b.param("classifier.bias".into(), Tensor::zeros(&[cfg.class_count]));

    let bns = b
        .layers
        .iter()
        .map(|l| BNParams::new(b.params[l.weight].value.shape()[0]))
        .collect();
    Ok(Model {
        config: cfg.clone(),
        params: b.params,
        bns,
        layers: b.layers,
        blocks,
        classifier: (w, bias),
    })
}

struct Pass<'a> {
    cfg: &'a ModelConfig,
    layers: &'a [ConvLayer],
    bns: &'a mut [BNParams],
    params: &'a [Var],
    mode: Mode,
    src: &'a mut dyn NoiseSource,
    features: Vec<(usize, Var)>,
    inputs: Vec<(usize, Var)>,
}

impl Pass<'_> {
    fn linear(&self, l: usize) -> Linear {
        Linear::Conv {
            weight: self.params[self.layers[l].weight],
            stride: self.layers[l].stride,
            pad: 1,
        }
    }

    fn affine(&self, l: usize) -> (Var, Var) {
        let (g, b) = self.layers[l].affine.expect("layer has its own affine step");
        (self.params[g], self.params[b])
    }

    fn noisy(&self, l: usize) -> bool {
        self.mode == Mode::Train
            && self.cfg.noise_type != NoiseType::None
            && !(l == 0 && self.cfg.noise_skip_first)
    }

    /// Batch-normalized pre-activation of layer `l`, with per-layer noise.
    fn normalized(&mut self, g: &mut Graph, x: Var, l: usize) -> Result<Var> {
        self.inputs.push((l, x));
        let linear = self.linear(l);
        let kind = if self.noisy(l) { self.cfg.noise_type } else { NoiseType::None };
        let spec = &self.cfg.noise;
        let bn = &mut self.bns[l];
        match kind {
            NoiseType::Mn => {
                let xn = noise::apply_mn(g, x, spec, self.src, self.mode)?;
                let z = linear.preact(g, xn)?;
                layers::batchnorm_standard(g, z, bn, self.mode)
            }
            NoiseType::WeightMn => {
                let w = noise::weight_noise(g, linear.weight(), spec, self.src, self.mode)?;
                let z = linear.with_weight(w).preact(g, x)?;
                layers::batchnorm_standard(g, z, bn, self.mode)
            }
            NoiseType::Ncmn0 => noise::ncmn0_layer(g, x, linear, bn, spec, self.src, self.mode),
            NoiseType::Ncmn1 => noise::ncmn1_layer(g, x, linear, bn, spec, self.src, self.mode),
            NoiseType::None | NoiseType::Ncmn2 | NoiseType::Shake => {
                let z = linear.preact(g, x)?;
                layers::batchnorm_standard(g, z, bn, self.mode)
            }
        }
    }

    fn affine_relu(&self, g: &mut Graph, zhat: Var, l: usize) -> Result<Var> {
        let (gm, bt) = self.affine(l);
        layers::affine_activation(g, zhat, gm, bt, Activation::Relu)
    }

    fn layer(&mut self, g: &mut Graph, x: Var, l: usize) -> Result<Var> {
        let zhat = self.normalized(g, x, l)?;
        if l > 0 {
            self.features.push((g.shape(zhat)[2], zhat));
        }
        self.affine_relu(g, zhat, l)
    }

    fn ncmn2_active(&self) -> bool {
        self.mode == Mode::Train && self.cfg.noise_type == NoiseType::Ncmn2
    }

    /// NCMN-2 over layers `a` and `b`; returns the normalized output of `b`.
    fn ncmn2(&mut self, g: &mut Graph, x: Var, a: usize, b: usize, claims: &mut BlockClaims) -> Result<Var> {
        let (la, lb) = (self.linear(a), self.linear(b));
        let ((ga, ba), (gb, bb)) = (self.affine(a), self.affine(b));
        let (lo, hi) = self.bns.split_at_mut(b);
        let mut first = BnLayer { linear: la, bn: &mut lo[a], gamma: ga, beta: ba };
        let mut second = BnLayer { linear: lb, bn: &mut hi[0], gamma: gb, beta: bb };
        noise::ncmn2_block(g, x, &mut first, &mut second, &self.cfg.noise, self.src, self.mode, claims)
    }

    fn shortcut(g: &mut Graph, x: Var, shortcut: &Option<Tensor>, stride: usize) -> Result<Var> {
        match shortcut {
            None => Ok(x),
            Some(k) => {
                let k = g.constant(k.clone());
                g.conv2d(x, k, stride, 0)
            }
        }
    }

    fn residual_out(&mut self, g: &mut Graph, zhat: Var, (gm, bt): (Var, Var), skip: Var) -> Result<Var> {
        let y = layers::affine_activation(g, zhat, gm, bt, Activation::Identity)?;
        let y = g.add(y, skip)?;
        let y = g.relu(y);
        self.features.push((g.shape(y)[2], y));
        Ok(y)
    }

    fn run(&mut self, g: &mut Graph, x: Var, blocks: &[Block]) -> Result<Var> {
        let mut claims = BlockClaims::new();
        let mut h = x;
        let mut i = 0;
        while i < blocks.len() {
            h = match &blocks[i] {
                Block::Single(l) if i > 0 && self.ncmn2_active() => {
                    let Some(Block::Single(l2)) = blocks.get(i + 1) else {
                        return Err(Error::config("ncmn2 needs an even number of layers after the stem"));
                    };
                    let zhat = self.ncmn2(g, h, *l, *l2, &mut claims)?;
                    self.features.push((g.shape(zhat)[2], zhat));
                    i += 1;
                    self.affine_relu(g, zhat, *l2)?
                }
                Block::Single(l) => self.layer(g, h, *l)?,
                Block::Pair { layers: [a, b], shortcut } => {
                    let zhat = if self.ncmn2_active() {
                        self.ncmn2(g, h, *a, *b, &mut claims)?
                    } else {
                        let z = self.normalized(g, h, *a)?;
                        let y = self.affine_relu(g, z, *a)?;
                        self.normalized(g, y, *b)?
                    };
                    let skip = Self::shortcut(g, h, shortcut, self.layers[*a].stride)?;
                    let affine = self.affine(*b);
                    self.residual_out(g, zhat, affine, skip)?
                }
                Block::TwoBranch { layers: branches, affine, shortcut } => {
                    let mut z = [h; 2];
                    for (p, [a, b]) in branches.iter().enumerate() {
                        let y = self.normalized(g, h, *a)?;
                        let y = self.affine_relu(g, y, *a)?;
                        z[p] = self.normalized(g, y, *b)?;
                    }
                    let mode = if self.cfg.noise_type == NoiseType::Shake { self.mode } else { Mode::Eval };
                    let mixed = noise::shake_combine(g, z[0], z[1], &self.cfg.shake, self.src, mode)?;
                    let skip = Self::shortcut(g, h, shortcut, self.layers[branches[0][0]].stride)?;
                    let affine = (self.params[affine.0], self.params[affine.1]);
                    self.residual_out(g, mixed, affine, skip)?
                }
            };
            i += 1;
        }
        Ok(h)
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Batch-norm statistics, one entry per conv layer.
    pub fn batch_norms(&self) -> &[BNParams] {
        &self.bns
    }

    pub fn batch_norms_mut(&mut self) -> &mut [BNParams] {
        &mut self.bns
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Runs the network on `x` (`[n, c, h, w]`). Train mode updates the
    /// batch-norm running statistics and draws masks from `src`.
    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode, src: &mut dyn NoiseSource) -> Result<Forward> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(Error::shape(format!(
                "model expects [n, {}, h, w] input, got {:?}",
                self.config.input_channels, shape
            )));
        }
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.value.clone())).collect();
        let mut pass = Pass {
            cfg: &self.config,
            layers: &self.layers,
            bns: &mut self.bns,
            params: &params,
            mode,
            src,
            features: Vec::new(),
            inputs: Vec::new(),
        };
        let h = pass.run(g, x, &self.blocks)?;
        let (features, inputs) = (pass.features, pass.inputs);

        let pooled = g.reduce_mean(h, &[2, 3])?;
        let n = g.shape(pooled)[0];
        let c = g.shape(pooled)[1];
        let pooled = g.reshape(pooled, &[n, c])?;
        let (w, b) = self.classifier;
        let logits = g.matmul(pooled, params[w])?;
        let bias = g.reshape(params[b], &[1, self.config.class_count])?;
        let logits = g.add(logits, bias)?;
        Ok(Forward { logits, params, features, inputs })
    }

    /// Eval-mode logits for a batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut m = self.clone();
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let f = m.forward(&mut g, x, Mode::Eval, &mut Scripted::new([]))?;
        Ok(g.value(f.logits).clone())
    }

    /// Eval-mode post-batch-norm activations, tagged with their spatial size.
    pub fn post_bn_features(&self, batch: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let mut m = self.clone();
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let f = m.forward(&mut g, x, Mode::Eval, &mut Scripted::new([]))?;
        Ok(f.features.into_iter().map(|(s, v)| (s, g.value(v).clone())).collect())
    }

    /// Eval-mode input of every conv layer, by layer index.
    pub fn layer_inputs(&self, batch: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let mut m = self.clone();
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let f = m.forward(&mut g, x, Mode::Eval, &mut Scripted::new([]))?;
        Ok(f.inputs.into_iter().map(|(l, v)| (l, g.value(v).clone())).collect())
    }

    /// Kernel `[c_out, c_in, 3, 3]` and stride of conv layer `l`.
    pub fn layer_kernel(&self, l: usize) -> Option<(&Tensor, usize)> {
        self.layers.get(l).map(|c| (&self.params[c.weight].value, c.stride))
    }

    /// Replaces every parameter and batch-norm statistic. Names, order and
    /// shapes must match.
    pub fn load_state(&mut self, params: Vec<Param>, bns: Vec<BNParams>) -> Result<()> {
        if params.len() != self.params.len() || bns.len() != self.bns.len() {
            return Err(Error::Data(format!(
                "state has {} params and {} batch norms, model has {} and {}",
                params.len(),
                bns.len(),
                self.params.len(),
                self.bns.len()
            )));
        }
        for (new, old) in params.iter().zip(&self.params) {
            if new.name != old.name || new.value.shape() != old.value.shape() {
                return Err(Error::Data(format!(
                    "parameter {} {:?} does not match model parameter {} {:?}",
                    new.name,
                    new.value.shape(),
                    old.name,
                    old.value.shape()
                )));
            }
        }
        for (i, (new, old)) in bns.iter().zip(&self.bns).enumerate() {
            new.validate()?;
            if new.channels() != old.channels() {
                return Err(Error::Data(format!("batch norm {i} has the wrong channel count")));
            }
        }
        self.params = params;
        self.bns = bns;
        Ok(())
    }

    /// Copies layer `l`'s kernel of output channel `from` onto channel `to`
    /// (together with its affine parameters).
    pub fn clone_channel(&mut self, l: usize, from: usize, to: usize) -> Result<()> {
        let layer = self.layers.get(l).ok_or_else(|| Error::config(format!("no layer {l}")))?;
        let w = &mut self.params[layer.weight].value;
        let c = w.shape()[0];
        if from >= c || to >= c {
            return Err(Error::config(format!("layer {l} has {c} channels")));
        }
        let per = w.len() / c;
        let src: Vec<f64> = w.data()[from * per..(from + 1) * per].to_vec();
        w.data_mut()[to * per..(to + 1) * per].copy_from_slice(&src);
        if let Some((g, b)) = layer.affine {
            for idx in [g, b] {
                let v = self.params[idx].value.data()[from];
                self.params[idx].value.data_mut()[to] = v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseRng;

    fn cfg(arch: Architecture, depth: usize, noise: NoiseType) -> ModelConfig {
        ModelConfig {
            architecture: arch,
            depth,
            width: 1,
            base_width: 2,
            class_count: 3,
            noise_type: noise,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn depth_four_plain() {
        let m = build_model(&cfg(Architecture::PlainCnn, 4, NoiseType::None), 1).unwrap();
        assert_eq!(m.conv_layer_count(), 4);
        let names: Vec<_> = m.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[..3], ["layer0.weight", "layer0.gamma", "layer0.beta"]);
        assert_eq!(names[names.len() - 2..], ["classifier.weight", "classifier.bias"]);
        assert_eq!(m.batch_norms().len(), 4);
    }

    #[test]
    fn noise_type_keeps_parameter_count() {
        let base = build_model(&cfg(Architecture::PlainCnn, 5, NoiseType::None), 1).unwrap();
        for n in [NoiseType::Mn, NoiseType::Ncmn0, NoiseType::Ncmn1, NoiseType::Ncmn2] {
            let m = build_model(&cfg(Architecture::PlainCnn, 5, n), 1).unwrap();
            assert_eq!(m.parameter_count(), base.parameter_count());
            assert_eq!(m.params(), base.params());
        }
        let two = build_model(&cfg(Architecture::Residual2Branch, 5, NoiseType::None), 1).unwrap();
        let shake = build_model(&cfg(Architecture::Residual2Branch, 5, NoiseType::Shake), 1).unwrap();
        assert_eq!(two.parameter_count(), shake.parameter_count());
    }

    #[test]
    fn pairing_rules() {
        assert!(matches!(
            build_model(&cfg(Architecture::PlainCnn, 4, NoiseType::Ncmn2), 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_model(&cfg(Architecture::Residual, 4, NoiseType::None), 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_model(&cfg(Architecture::PlainCnn, 5, NoiseType::Shake), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_shapes_for_every_architecture() {
        let x = Tensor::new(&[4, 3, 8, 8], (0..768).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect()).unwrap();
        for (arch, noise) in [
            (Architecture::PlainCnn, NoiseType::Mn),
            (Architecture::PlainCnn, NoiseType::Ncmn2),
            (Architecture::Residual, NoiseType::Ncmn1),
            (Architecture::Residual, NoiseType::Ncmn2),
            (Architecture::Residual2Branch, NoiseType::Shake),
            (Architecture::Residual2Branch, NoiseType::WeightMn),
        ] {
            let mut m = build_model(&cfg(arch, 7, noise), 3).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let mut rng = NoiseRng::new(0);
            let f = m.forward(&mut g, xv, Mode::Train, &mut rng).unwrap();
            assert_eq!(g.shape(f.logits), &[4, 3]);
            assert!(g.value(f.logits).all_finite());
            let loss = g.softmax_cross_entropy(f.logits, &[0, 1, 2, 0]).unwrap();
            let grads = g.backward(loss).unwrap();
            for (p, v) in m.params().iter().zip(&f.params) {
                assert!(grads.get(*v).is_some(), "{} {arch:?} {noise:?}", p.name);
            }
            let feats = m.post_bn_features(&x).unwrap();
            assert!(!feats.is_empty());
            let sizes: Vec<usize> = feats.iter().map(|f| f.0).collect();
            assert!(sizes.windows(2).all(|w| w[0] >= w[1]), "{sizes:?}");
        }
    }

    #[test]
    fn eval_is_deterministic() {
        let m = build_model(&cfg(Architecture::PlainCnn, 4, NoiseType::Mn), 2).unwrap();
        let x = Tensor::full(&[2, 3, 4, 4], 0.5);
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    }
}
