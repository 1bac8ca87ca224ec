//! The masking network: a small residual backbone with stride-4/8/16 taps,
//! a top-down pyramid that fuses them, a mask decoder producing a (0,1)
//! mask shaped like the deepest feature map, the embedding head, and the
//! occlusion pattern predictor that supervises the mask.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{conv_out, BatchMoments, BnStats, ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::patterns::codebook_len;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT: f64 = 0.25;

const S1: ConvGeom = ConvGeom { stride: 1, pad: 1 };
const S2: ConvGeom = ConvGeom { stride: 2, pad: 1 };
const POINTWISE: ConvGeom = ConvGeom { stride: 1, pad: 0 };

/// Where (and whether) the decoded mask is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// No decoder or predictor: the plain recognition network.
    None,
    /// `C x H x W` mask on the deepest conv features.
    Conv3d,
    /// `H x W` mask broadcast over channels.
    Conv2d,
    /// `d`-vector mask on the embedding.
    Fc,
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskMode::None),
            "conv3d" => Ok(MaskMode::Conv3d),
            "conv2d" => Ok(MaskMode::Conv2d),
            "fc" => Ok(MaskMode::Fc),
            other => Err(Error::config("net.mask_mode", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternHead {
    /// Softmax over the pattern codebook.
    Classify,
    /// Normalized box corners.
    Regress,
}

impl FromStr for PatternHead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(PatternHead::Classify),
            "regress" => Ok(PatternHead::Regress),
            other => Err(Error::config("loss.pattern_head", format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stem_channels: usize,
    /// Channels of the stride-4, stride-8 and stride-16 stages.
    pub stage_channels: [usize; 3],
    pub res_blocks: usize,
    pub pyramid_channels: usize,
    pub embedding_dim: usize,
    pub mask_mode: MaskMode,
    pub pattern_head: PatternHead,
    pub k: usize,
    pub dropout: f64,
    pub num_classes: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            height: 112,
            width: 96,
            channels: 3,
            stem_channels: 16,
            stage_channels: [32, 64, 128],
            res_blocks: 1,
            pyramid_channels: 64,
            embedding_dim: 128,
            mask_mode: MaskMode::Conv3d,
            pattern_head: PatternHead::Classify,
            k: 5,
            dropout: 0.4,
            num_classes: 40,
        }
    }
}

/// Spatial size after one stride-2 3x3 convolution.
pub fn halve(size: usize) -> usize {
    conv_out(size, 3, S2)
}

/// Per-level `(height, width)` of the feature maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureShapes {
    pub stem: (usize, usize),
    /// Stride 4 (C3 / X3).
    pub c3: (usize, usize),
    /// Stride 8 (C2 / X2).
    pub c2: (usize, usize),
    /// Stride 16 (X1 / mask).
    pub x1: (usize, usize),
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::config("net.dims", "image dims must be at least 16"));
        }
        if self.channels == 0 || self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::config("net.channels", "channel counts must be positive"));
        }
        if self.pyramid_channels == 0 || self.embedding_dim == 0 {
            return Err(Error::config("net.pyramid_channels", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("net.dropout", "must be in [0, 1)"));
        }
        if !(1..=crate::patterns::MAX_GRID).contains(&self.k) {
            return Err(Error::config("k", "grid resolution outside [1, 16]"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("net.num_classes", "need at least two identities"));
        }
        Ok(())
    }

    pub fn shapes(&self) -> FeatureShapes {
        let h = |s: (usize, usize)| (halve(s.0), halve(s.1));
        let stem = h((self.height, self.width));
        let c3 = h(stem);
        let c2 = h(c3);
        let x1 = h(c2);
        FeatureShapes { stem, c3, c2, x1 }
    }

    /// Pattern head output width.
    pub fn pattern_outputs(&self) -> usize {
        match self.pattern_head {
            PatternHead::Classify => codebook_len(self.k),
            PatternHead::Regress => 4,
        }
    }

    pub fn x1_features(&self) -> usize {
        let (h, w) = self.shapes().x1;
        self.stage_channels[2] * h * w
    }

    /// Flattened mask size seen by the predictor.
    pub fn mask_features(&self) -> usize {
        let (h, w) = self.shapes().x1;
        match self.mask_mode {
            MaskMode::None => 0,
            MaskMode::Conv3d => self.stage_channels[2] * h * w,
            MaskMode::Conv2d => h * w,
            MaskMode::Fc => self.embedding_dim,
        }
    }

    pub fn has_mask(&self) -> bool {
        self.mask_mode != MaskMode::None
    }
}

/// Parameter initialiser; mirrors the forward pass layer by layer.
struct Init<'a, T> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = self.normal(&[cout, cin, k, k], std);
        self.store.add_param(&format!("{name}.w"), w);
        if bias {
            self.store.add_param(&format!("{name}.b"), Tensor::zeros(&[cout]));
        }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize, bias: bool) {
        let w = self.normal(&[fout, fin], (1.0 / fin as f64).sqrt());
        self.store.add_param(&format!("{name}.w"), w);
        if bias {
            self.store.add_param(&format!("{name}.b"), Tensor::zeros(&[fout]));
        }
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.store.add_param(&format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        self.store.add_param(&format!("{name}.beta"), Tensor::zeros(&[c]));
        self.store.add_buffer(&format!("{name}.mean"), Tensor::zeros(&[c]));
        self.store.add_buffer(&format!("{name}.var"), Tensor::full(&[c], T::one()));
    }

    fn prelu(&mut self, name: &str, c: usize) {
        self.store.add_param(
            &format!("{name}.a"),
            Tensor::full(&[c], T::from_f64_lossy(PRELU_INIT)),
        );
    }

    fn conv_bn_act(&mut self, name: &str, cin: usize, cout: usize) {
        self.conv(&format!("{name}.conv"), cin, cout, 3, false);
        self.bn(&format!("{name}.bn"), cout);
        self.prelu(&format!("{name}.act"), cout);
    }

    fn res_block(&mut self, name: &str, c: usize) {
        self.conv(&format!("{name}.conv1"), c, c, 3, false);
        self.bn(&format!("{name}.bn1"), c);
        self.prelu(&format!("{name}.act1"), c);
        self.conv(&format!("{name}.conv2"), c, c, 3, false);
        self.bn(&format!("{name}.bn2"), c);
    }
}

/// Model parameters plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
}

/// How a forward pass treats the decoded mask.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum MaskOverride {
    /// Use the decoder output.
    #[default]
    Decoded,
    /// Replace the mask by a constant (the decoder still runs).
    Constant(f64),
    /// Binarize the decoded mask: `value >= t` becomes 1, else 0.
    Binarized(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    pub training: bool,
    pub mask: MaskOverride,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            training: true,
            mask: MaskOverride::Decoded,
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

/// Handles into the forward graph.
pub struct ForwardVars {
    pub x1: Var,
    pub c2: Var,
    pub c3: Var,
    pub x2: Option<Var>,
    pub x3: Option<Var>,
    pub mask: Option<Var>,
    pub cleaned: Var,
    pub embedding: Var,
    pub pattern: Option<Var>,
}

/// A recorded forward pass, ready for losses and backward.
pub struct ForwardPass<T> {
    pub graph: Graph<T>,
    pub vars: ForwardVars,
    /// Graph leaf for each parameter used, by parameter id.
    pub param_vars: Vec<Option<Var>>,
    /// Batch statistics of every batch-norm layer run in training mode.
    pub moments: Vec<(String, BatchMoments<T>)>,
}

/// Plain-tensor results of an evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    pub embedding: Tensor<T>,
    pub pattern: Option<Tensor<T>>,
    pub mask: Option<Tensor<T>>,
}

struct Ctx<'a, T: Scalar> {
    g: Graph<T>,
    params: &'a ParamStore<T>,
    param_vars: Vec<Option<Var>>,
    opts: ForwardOptions,
    dropout: f64,
    rng: Option<&'a mut ChaCha8Rng>,
    moments: Vec<(String, BatchMoments<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    fn p(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.g.param(self.params.by_id(id).clone());
        self.param_vars[id] = Some(v);
        v
    }

    fn conv(&mut self, name: &str, x: Var, geom: ConvGeom, bias: bool) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let b = bias.then(|| self.p(&format!("{name}.b")));
        self.g.conv2d(x, w, b, geom)
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.g.linear(x, w, Some(b))
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let eps = T::from_f64_lossy(BN_EPS);
        if self.opts.training {
            let (y, m) = self.g.batch_norm(x, gamma, beta, BnStats::Batch { eps })?;
            self.moments.push((name.to_string(), m.expect("batch moments")));
            Ok(y)
        } else {
            let mean = self.params.get(&format!("{name}.mean")).expect("bn mean");
            let var = self.params.get(&format!("{name}.var")).expect("bn var");
            let (y, _) = self.g.batch_norm(
                x,
                gamma,
                beta,
                BnStats::Fixed {
                    mean: mean.data(),
                    var: var.data(),
                    eps,
                },
            )?;
            Ok(y)
        }
    }

    fn prelu(&mut self, name: &str, x: Var) -> Result<Var> {
        let a = self.p(&format!("{name}.a"));
        self.g.prelu(x, a)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        if !self.opts.training || self.dropout == 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::invalid("training-mode dropout needs an RNG"))?;
        let keep = 1.0 - self.dropout;
        let scale = T::from_f64_lossy(1.0 / keep);
        let mask = (0..self.g.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        self.g.dropout(x, mask)
    }

    fn conv_bn_act(&mut self, name: &str, x: Var, geom: ConvGeom) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv"), x, geom, false)?;
        let y = self.bn(&format!("{name}.bn"), y)?;
        self.prelu(&format!("{name}.act"), y)
    }

    fn res_block(&mut self, name: &str, x: Var) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv1"), x, S1, false)?;
        let y = self.bn(&format!("{name}.bn1"), y)?;
        let y = self.prelu(&format!("{name}.act1"), y)?;
        let y = self.conv(&format!("{name}.conv2"), y, S1, false)?;
        let y = self.bn(&format!("{name}.bn2"), y)?;
        self.g.add(x, y)
    }
}

impl<T: Scalar> Network<T> {
    /// Fresh network with seeded He-style initialisation.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let [ch3, ch2, ch1] = config.stage_channels;
        let p = config.pyramid_channels;
        let d = config.embedding_dim;

        init.conv_bn_act("stem", config.channels, config.stem_channels);
        let mut cin = config.stem_channels;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            init.conv_bn_act(&format!("s{}.down", i + 1), cin, c);
            for b in 0..config.res_blocks {
                init.res_block(&format!("s{}.res{b}", i + 1), c);
            }
            cin = c;
        }

        if config.has_mask() {
            init.conv("fpn.lat_x1", ch1, p, 1, true);
            init.conv("fpn.lat_c2", ch2, p, 1, true);
            init.conv("fpn.fuse2", p, p, 3, true);
            init.conv("fpn.lat_x2", p, p, 1, true);
            init.conv("fpn.lat_c3", ch3, p, 1, true);
            init.conv("fpn.fuse3", p, p, 3, true);

            init.conv("md.conv1", p, p, 3, true);
            init.prelu("md.act", p);
            init.bn("md.bn", p);
            let out = match config.mask_mode {
                MaskMode::Conv2d => 1,
                _ => ch1,
            };
            init.conv("md.conv2", p, out, 3, true);
            if config.mask_mode == MaskMode::Fc {
                init.linear("md.fc", ch1, d, true);
            }

            let mf = config.mask_features();
            init.bn("opp.bn_in", mf);
            init.linear("opp.fc", mf, config.pattern_outputs(), true);
            init.bn("opp.bn_out", config.pattern_outputs());
        }

        let xf = config.x1_features();
        init.bn("emb.bn_in", xf);
        init.linear("emb.fc", xf, d, true);
        init.bn("emb.bn_out", d);

        let cls = init.normal(&[config.num_classes, d], 1.0);
        init.store.add_param("cls.w", cls);

        Ok(Self {
            params: init.store,
            config,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<usize> {
        let c = &self.config;
        match *images.shape() {
            [n, ch, h, w] if ch == c.channels && h == c.height && w == c.width && n > 0 => Ok(n),
            ref s => Err(Error::invalid(format!(
                "expected images [N, {}, {}, {}], got {s:?}",
                c.channels, c.height, c.width
            ))),
        }
    }

    /// Record the full forward graph for a batch `[N, C, H, W]`.
    pub fn forward(
        &self,
        images: &Tensor<T>,
        opts: ForwardOptions,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass<T>> {
        self.check_input(images)?;
        if let MaskOverride::Binarized(t) = opts.mask {
            check_threshold(t)?;
        }
        let cfg = &self.config;
        let mut cx = Ctx {
            g: Graph::new(),
            params: &self.params,
            param_vars: vec![None; self.params.len()],
            opts,
            dropout: cfg.dropout,
            rng,
            moments: Vec::new(),
        };
        let input = cx.g.input(images.clone());

        // backbone
        let mut x = cx.conv_bn_act("stem", input, S2)?;
        let mut taps = Vec::with_capacity(3);
        for i in 1..=3 {
            x = cx.conv_bn_act(&format!("s{i}.down"), x, S2)?;
            for b in 0..cfg.res_blocks {
                x = cx.res_block(&format!("s{i}.res{b}"), x)?;
            }
            taps.push(x);
        }
        let (c3, c2, x1) = (taps[0], taps[1], taps[2]);

        let mut x2 = None;
        let mut x3 = None;
        let mut mask = None;
        let mut pattern = None;
        let cleaned;
        let embedding;

        if cfg.has_mask() {
            let (x2v, x3v) = pyramid(&mut cx, x1, c2, c3)?;
            x2 = Some(x2v);
            x3 = Some(x3v);
            let raw = decode_mask(&mut cx, cfg.mask_mode, x3v)?;
            let m = override_mask(&mut cx.g, raw, opts.mask)?;
            mask = Some(m);
            if cfg.mask_mode == MaskMode::Fc {
                cleaned = x1;
                let e = embed(&mut cx, x1)?;
                embedding = cx.g.mul(e, m)?;
            } else {
                cleaned = apply_mask_var(&mut cx.g, x1, m, cfg.mask_mode)?;
                embedding = embed(&mut cx, cleaned)?;
            }
            pattern = Some(predict_pattern(&mut cx, m)?);
        } else {
            cleaned = x1;
            embedding = embed(&mut cx, x1)?;
        }

        Ok(ForwardPass {
            graph: cx.g,
            vars: ForwardVars {
                x1,
                c2,
                c3,
                x2,
                x3,
                mask,
                cleaned,
                embedding,
                pattern,
            },
            param_vars: cx.param_vars,
            moments: cx.moments,
        })
    }

    /// Evaluation-mode outputs as plain tensors.
    pub fn infer(&self, images: &Tensor<T>, mask: MaskOverride) -> Result<ForwardOutput<T>> {
        let pass = self.forward(
            images,
            ForwardOptions {
                training: false,
                mask,
            },
            None,
        )?;
        let g = &pass.graph;
        Ok(ForwardOutput {
            embedding: g.value(pass.vars.embedding).clone(),
            pattern: pass.vars.pattern.map(|v| g.value(v).clone()),
            mask: pass.vars.mask.map(|v| g.value(v).clone()),
        })
    }

    /// Fold training-mode batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, moments: &[(String, BatchMoments<T>)]) {
        let mom = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - mom;
        for (name, m) in moments {
            for (suffix, batch) in [("mean", &m.mean), ("var", &m.var)] {
                let buf = self
                    .params
                    .get_mut(&format!("{name}.{suffix}"))
                    .expect("running stat buffer");
                for (r, &b) in buf.data_mut().iter_mut().zip(batch.iter()) {
                    *r = keep * *r + mom * b;
                }
            }
        }
    }

    /// Names of parameters that belong to the mask decoder, pyramid or
    /// pattern predictor.
    pub fn is_mask_branch(name: &str) -> bool {
        name.starts_with("fpn.") || name.starts_with("md.") || name.starts_with("opp.")
    }
}

/// `X2 = conv(up(conv(X1)) + conv(C2))`, `X3 = conv(up(conv(X2)) + conv(C3))`.
fn pyramid<T: Scalar>(cx: &mut Ctx<'_, T>, x1: Var, c2: Var, c3: Var) -> Result<(Var, Var)> {
    let x2 = top_down(cx, x1, c2, "fpn.lat_x1", "fpn.lat_c2", "fpn.fuse2")?;
    let x3 = top_down(cx, x2, c3, "fpn.lat_x2", "fpn.lat_c3", "fpn.fuse3")?;
    Ok((x2, x3))
}

fn top_down<T: Scalar>(
    cx: &mut Ctx<'_, T>,
    coarse: Var,
    lateral: Var,
    coarse_name: &str,
    lateral_name: &str,
    fuse_name: &str,
) -> Result<Var> {
    let (lh, lw) = {
        let s = cx.g.value(lateral).shape();
        (s[2], s[3])
    };
    let top = cx.conv(coarse_name, coarse, POINTWISE, true)?;
    let up = cx.g.upsample2x(top, lh, lw)?;
    let lat = cx.conv(lateral_name, lateral, POINTWISE, true)?;
    let sum = cx.g.add(up, lat)?;
    cx.conv(fuse_name, sum, S1, true)
}

/// Conv(s2) - PReLU - BN - Conv(s2) - Sigmoid; the fc variant pools and
/// projects to the embedding width before the sigmoid.
fn decode_mask<T: Scalar>(cx: &mut Ctx<'_, T>, mode: MaskMode, x3: Var) -> Result<Var> {
    let y = cx.conv("md.conv1", x3, S2, true)?;
    let y = cx.prelu("md.act", y)?;
    let y = cx.bn("md.bn", y)?;
    let y = cx.conv("md.conv2", y, S2, true)?;
    let y = if mode == MaskMode::Fc {
        let pooled = cx.g.global_avg_pool(y)?;
        cx.linear("md.fc", pooled)?
    } else {
        y
    };
    Ok(cx.g.sigmoid(y))
}

fn override_mask<T: Scalar>(g: &mut Graph<T>, raw: Var, how: MaskOverride) -> Result<Var> {
    match how {
        MaskOverride::Decoded => Ok(raw),
        MaskOverride::Constant(c) => {
            let t = Tensor::full(g.value(raw).shape(), T::from_f64_lossy(c));
            Ok(g.input(t))
        }
        MaskOverride::Binarized(t) => {
            let b = binarize_mask(g.value(raw), t)?;
            Ok(g.input(b))
        }
    }
}

fn embed<T: Scalar>(cx: &mut Ctx<'_, T>, features: Var) -> Result<Var> {
    let flat = cx.g.flatten(features)?;
    let y = cx.bn("emb.bn_in", flat)?;
    let y = cx.dropout(y)?;
    let y = cx.linear("emb.fc", y)?;
    cx.bn("emb.bn_out", y)
}

fn predict_pattern<T: Scalar>(cx: &mut Ctx<'_, T>, mask: Var) -> Result<Var> {
    let flat = cx.g.flatten(mask)?;
    let y = cx.bn("opp.bn_in", flat)?;
    let y = cx.dropout(y)?;
    let y = cx.linear("opp.fc", y)?;
    cx.bn("opp.bn_out", y)
}

fn apply_mask_var<T: Scalar>(g: &mut Graph<T>, x1: Var, mask: Var, mode: MaskMode) -> Result<Var> {
    match mode {
        MaskMode::Conv3d => g.mul(x1, mask),
        MaskMode::Conv2d => g.mul_spatial(x1, mask),
        MaskMode::Fc | MaskMode::None => Err(Error::invalid(format!(
            "mask mode {mode:?} is not applied to conv features"
        ))),
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("binarization threshold {t} outside (0, 1)")))
    }
}

/// `value >= t` becomes 1, everything else 0.
pub fn binarize_mask<T: Scalar>(mask: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_threshold(t)?;
    let t = T::from_f64_lossy(t);
    Ok(mask.map(|v| if v >= t { T::one() } else { T::zero() }))
}

/// Element-wise masking of features on plain tensors.
///
/// `conv3d`: `mask` matches `features`. `conv2d`: `mask` is `[N,1,H,W]` and
/// broadcasts over channels. `fc`: `features` is the `[N,d]` embedding and
/// `mask` matches it.
pub fn apply_mask<T: Scalar>(features: &Tensor<T>, mask: &Tensor<T>, mode: MaskMode) -> Result<Tensor<T>> {
    let mismatch = || {
        Error::invalid(format!(
            "mask {:?} does not fit features {:?} in mode {mode:?}",
            mask.shape(),
            features.shape()
        ))
    };
    match mode {
        MaskMode::Conv3d | MaskMode::Fc => {
            let rank_ok = if mode == MaskMode::Fc {
                features.shape().len() == 2
            } else {
                features.shape().len() == 4
            };
            if mask.shape() != features.shape() || !rank_ok {
                return Err(mismatch());
            }
            let data = features.data().iter().zip(mask.data()).map(|(&a, &b)| a * b).collect();
            Ok(Tensor::from_vec(features.shape(), data))
        }
        MaskMode::Conv2d => {
            let mut g = Graph::new();
            let (n, _, h, w) = match *features.shape() {
                [n, c, h, w] => (n, c, h, w),
                _ => return Err(mismatch()),
            };
            if mask.shape() != [n, 1, h, w] {
                return Err(mismatch());
            }
            let x = g.input(features.clone());
            let m = g.input(mask.clone());
            let y = g.mul_spatial(x, m)?;
            Ok(g.value(y).clone())
        }
        MaskMode::None => Err(mismatch()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: MaskMode) -> NetworkConfig {
        NetworkConfig {
            height: 16,
            width: 16,
            channels: 1,
            stem_channels: 2,
            stage_channels: [2, 3, 4],
            res_blocks: 1,
            pyramid_channels: 3,
            embedding_dim: 5,
            mask_mode: mode,
            pattern_head: PatternHead::Classify,
            k: 2,
            dropout: 0.0,
            num_classes: 3,
        }
    }

    #[test]
    fn shapes_for_reference_dims() {
        let mut cfg = NetworkConfig::default();
        let s = cfg.shapes();
        assert_eq!((s.c3, s.c2, s.x1), ((28, 24), (14, 12), (7, 6)));
        cfg.height = 56;
        cfg.width = 48;
        let s = cfg.shapes();
        assert_eq!((s.c3, s.c2, s.x1), ((14, 12), (7, 6), (4, 3)));
    }

    #[test]
    fn pattern_head_widths() {
        let mut cfg = NetworkConfig::default();
        assert_eq!(cfg.pattern_outputs(), 226);
        cfg.k = 4;
        assert_eq!(cfg.pattern_outputs(), 101);
        cfg.pattern_head = PatternHead::Regress;
        assert_eq!(cfg.pattern_outputs(), 4);
    }

    #[test]
    fn binarize_rule() {
        let m = Tensor::from_vec(&[3], vec![0.3f64, 0.5, 0.7]);
        assert_eq!(binarize_mask(&m, 0.5).unwrap().data(), &[0.0, 1.0, 1.0]);
        assert!(binarize_mask(&m, 0.0).is_err());
        assert!(binarize_mask(&m, 1.0).is_err());
    }

    #[test]
    fn apply_mask_modes() {
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
        let ones = Tensor::full(&[1, 2, 1, 2], 1.0);
        assert_eq!(apply_mask(&x, &ones, MaskMode::Conv3d).unwrap(), x);
        let half = Tensor::full(&[1, 2, 1, 2], 0.5);
        assert_eq!(apply_mask(&x, &half, MaskMode::Conv3d).unwrap().data(), &[0.5, 1.0, 1.5, 2.0]);
        let m2 = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 1.0]);
        assert_eq!(apply_mask(&x, &m2, MaskMode::Conv2d).unwrap().data(), &[0.0, 2.0, 0.0, 4.0]);
        assert!(apply_mask(&x, &m2, MaskMode::Conv3d).is_err());
        assert!(apply_mask(&x, &ones, MaskMode::Fc).is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = Network::<f64>::new(tiny(MaskMode::Conv3d), 3).unwrap();
        let img = Tensor::from_vec(&[2, 1, 16, 16], (0..512).map(|i| (i as f64 * 0.37).sin()).collect());
        let a = net.infer(&img, MaskOverride::Decoded).unwrap();
        let b = net.infer(&img, MaskOverride::Decoded).unwrap();
        assert_eq!(a, b);
        let m = a.mask.unwrap();
        assert_eq!(m.shape(), &[2, 4, 1, 1]);
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a.pattern.unwrap().shape(), &[2, 10]);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let net = Network::<f64>::new(tiny(MaskMode::None), 3).unwrap();
        let img = Tensor::zeros(&[1, 1, 8, 16]);
        assert!(matches!(
            net.infer(&img, MaskOverride::Decoded),
            Err(Error::InvalidArgument(_))
        ));
    }
}
