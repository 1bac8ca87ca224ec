//! Two-stage training: a clean pretrain of backbone + embedding head, then
//! an end-to-end finetune on mixed occluded/clean batches. Also hosts the
//! checkpoint format (parameters, momentum, RNG state, config echo).

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::loss::{MarginPreset, MarginSpec};
use crate::network::{ForwardOptions, MaskMode, Network, NetworkConfig, PatternHead};
use crate::params::{Container, ParamStore};
use crate::synth::DatasetManifest;
use crate::tensor::Tensor;

/// Bumped whenever the checkpoint metadata layout changes.
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::config("stage", format!("unknown stage `{other}`"))),
        }
    }
}

/// Which model variant a run produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Use the network and loss settings exactly as configured.
    None,
    /// Clean pretrain only.
    Baseline,
    /// Finetune on occluded data without decoder or predictor.
    BaselineAug,
    /// Decoder without pattern supervision (lambda = 0).
    BaselineMd,
    /// Decoder with pattern supervision (lambda > 0).
    From,
}

impl FromStr for BaselineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BaselineMode::None),
            "baseline" => Ok(BaselineMode::Baseline),
            "baseline_aug" => Ok(BaselineMode::BaselineAug),
            "baseline_md" => Ok(BaselineMode::BaselineMd),
            "from" => Ok(BaselineMode::From),
            other => Err(Error::config("mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Occluded:clean composition of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixRatio {
    pub occluded: usize,
    pub clean: usize,
}

impl MixRatio {
    pub const DEFAULT: MixRatio = MixRatio {
        occluded: 2,
        clean: 1,
    };

    /// `(occluded, clean)` counts for a batch.
    pub fn split(&self, batch: usize) -> Result<(usize, usize)> {
        let parts = self.occluded + self.clean;
        if parts == 0 {
            return Err(Error::config("mix", "ratio 0:0 selects nothing"));
        }
        if batch == 0 || !batch.is_multiple_of(parts) {
            return Err(Error::config(
                "batch_size",
                format!("{batch} cannot be split {}:{}", self.occluded, self.clean),
            ));
        }
        let unit = batch / parts;
        Ok((unit * self.occluded, unit * self.clean))
    }
}

impl FromStr for MixRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("mix", format!("expected `occluded:clean`, got `{s}`"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        Ok(Self {
            occluded: a.trim().parse().map_err(|_| bad())?,
            clean: b.trim().parse().map_err(|_| bad())?,
        })
    }
}

impl fmt::Display for MixRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.occluded, self.clean)
    }
}

/// Architecture knobs that do not come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetKnobs {
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    pub res_blocks: usize,
    pub pyramid_channels: usize,
    pub embedding_dim: usize,
    pub mask_mode: MaskMode,
    pub dropout: f64,
    pub init_seed: u64,
}

impl Default for NetKnobs {
    fn default() -> Self {
        let n = NetworkConfig::default();
        Self {
            stem_channels: n.stem_channels,
            stage_channels: n.stage_channels,
            res_blocks: n.res_blocks,
            pyramid_channels: n.pyramid_channels,
            embedding_dim: n.embedding_dim,
            mask_mode: n.mask_mode,
            dropout: n.dropout,
            init_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub mode: BaselineMode,
    pub clean_manifest: PathBuf,
    pub occluded_manifest: Option<PathBuf>,
    pub mix: MixRatio,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub margin: MarginSpec,
    pub lambda: f64,
    pub pattern_head: PatternHead,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub net: NetKnobs,
    /// Checkpoints and the JSONL log go here; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            mode: BaselineMode::From,
            clean_manifest: PathBuf::new(),
            occluded_manifest: None,
            mix: MixRatio::DEFAULT,
            batch_size: 32,
            epochs: 15,
            lr: 0.1,
            decay_epochs: vec![8, 12],
            decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            margin: MarginSpec::preset(MarginPreset::CosFace, 30.0),
            lambda: 1.0,
            pattern_head: PatternHead::Classify,
            grad_clip: None,
            seed: 1,
            net: NetKnobs::default(),
            out_dir: None,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "stage",
    "mode",
    "data.clean",
    "data.occluded",
    "data.mix",
    "batch_size",
    "epochs",
    "lr",
    "lr.decay_epochs",
    "lr.decay_factor",
    "momentum",
    "weight_decay",
    "loss.preset",
    "loss.m1",
    "loss.m2",
    "loss.m3",
    "loss.s",
    "loss.lambda",
    "loss.pattern_head",
    "grad_clip",
    "seed",
    "net.stem_channels",
    "net.stage_channels",
    "net.res_blocks",
    "net.pyramid_channels",
    "net.embedding_dim",
    "net.mask_mode",
    "net.dropout",
    "net.init_seed",
    "out_dir",
];

fn parse_list<T: FromStr>(field: &str, s: &str) -> Result<Vec<T>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::config(field, format!("bad list entry `{}`", p.trim())))
        })
        .collect()
}

impl TrainConfig {
    /// Parse a key/value config; relative paths resolve against `base`.
    pub fn from_kv(kv: &KvConfig, base: &Path) -> Result<Self> {
        kv.reject_unknown(TRAIN_KEYS)?;
        let d = Self::default();
        let path = |key: &str| -> Option<PathBuf> { kv.raw(key).map(|p| base.join(p)) };

        let preset: MarginPreset = kv.get_or("loss.preset", MarginPreset::CosFace)?;
        let s = kv.get_or("loss.s", d.margin.s)?;
        let mut margin = MarginSpec::preset(preset, s);
        margin.m1 = kv.get_or("loss.m1", margin.m1)?;
        margin.m2 = kv.get_or("loss.m2", margin.m2)?;
        margin.m3 = kv.get_or("loss.m3", margin.m3)?;

        let stage_channels = match kv.raw("net.stage_channels") {
            None => d.net.stage_channels,
            Some(v) => {
                let list: Vec<usize> = parse_list("net.stage_channels", v)?;
                list.try_into().map_err(|_| {
                    Error::config("net.stage_channels", "expected three comma-separated counts")
                })?
            }
        };
        let net = NetKnobs {
            stem_channels: kv.get_or("net.stem_channels", d.net.stem_channels)?,
            stage_channels,
            res_blocks: kv.get_or("net.res_blocks", d.net.res_blocks)?,
            pyramid_channels: kv.get_or("net.pyramid_channels", d.net.pyramid_channels)?,
            embedding_dim: kv.get_or("net.embedding_dim", d.net.embedding_dim)?,
            mask_mode: kv.get_or("net.mask_mode", d.net.mask_mode)?,
            dropout: kv.get_or("net.dropout", d.net.dropout)?,
            init_seed: kv.get_or("net.init_seed", d.net.init_seed)?,
        };

        let cfg = Self {
            stage: kv.require("stage")?,
            mode: kv.get_or("mode", d.mode)?,
            clean_manifest: path("data.clean")
                .ok_or_else(|| Error::config("data.clean", "missing required key"))?,
            occluded_manifest: path("data.occluded"),
            mix: kv.get_or("data.mix", d.mix)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            lr: kv.get_or("lr", d.lr)?,
            decay_epochs: match kv.raw("lr.decay_epochs") {
                Some(v) => parse_list("lr.decay_epochs", v)?,
                None => d.decay_epochs,
            },
            decay_factor: kv.get_or("lr.decay_factor", d.decay_factor)?,
            momentum: kv.get_or("momentum", d.momentum)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            margin,
            lambda: kv.get_or("loss.lambda", d.lambda)?,
            pattern_head: kv.get_or("loss.pattern_head", d.pattern_head)?,
            grad_clip: kv.get("grad_clip")?,
            seed: kv.get_or("seed", d.seed)?,
            net,
            out_dir: path("out_dir"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KvConfig::load(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_kv(&kv, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.decay_factor >= 1.0) {
            return Err(Error::config("lr.decay_factor", "must be >= 1"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("lr.decay_epochs", "must be strictly increasing"));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::config("lr.decay_epochs", "must be below `epochs`"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("loss.lambda", "must be >= 0"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        self.margin.validate()?;
        match self.stage {
            Stage::Pretrain => {
                if self.batch_size == 0 {
                    return Err(Error::config("batch_size", "must be positive"));
                }
            }
            Stage::Finetune => {
                self.mix.split(self.batch_size)?;
                if self.mix.occluded > 0 && self.occluded_manifest.is_none() {
                    return Err(Error::config("data.occluded", "finetuning needs an occluded manifest"));
                }
                match self.mode {
                    BaselineMode::Baseline => {
                        return Err(Error::config("mode", "baseline has no finetune stage"));
                    }
                    BaselineMode::From if self.lambda == 0.0 => {
                        return Err(Error::config("loss.lambda", "mode `from` needs lambda > 0"));
                    }
                    BaselineMode::BaselineMd | BaselineMode::From
                        if self.net.mask_mode == MaskMode::None =>
                    {
                        return Err(Error::config("net.mask_mode", "this mode needs a mask decoder"));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Mask mode actually used by this stage and baseline mode.
    pub fn effective_mask_mode(&self) -> MaskMode {
        match (self.stage, self.mode) {
            (Stage::Pretrain, _) | (_, BaselineMode::BaselineAug) => MaskMode::None,
            _ => self.net.mask_mode,
        }
    }

    /// Pattern-loss weight actually used.
    pub fn effective_lambda(&self) -> f64 {
        match (self.stage, self.mode) {
            (Stage::Pretrain, _) => 0.0,
            (_, BaselineMode::BaselineMd | BaselineMode::BaselineAug) => 0.0,
            _ => self.lambda,
        }
    }

    /// Learning rate at zero-based epoch `e`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.lr, &self.decay_epochs, self.decay_factor, epoch)
    }

    pub fn network_config(&self, data: &TrainData) -> NetworkConfig {
        NetworkConfig {
            height: data.height,
            width: data.width,
            channels: data.channels,
            stem_channels: self.net.stem_channels,
            stage_channels: self.net.stage_channels,
            res_blocks: self.net.res_blocks,
            pyramid_channels: self.net.pyramid_channels,
            embedding_dim: self.net.embedding_dim,
            mask_mode: self.effective_mask_mode(),
            pattern_head: self.pattern_head,
            k: data.k,
            dropout: self.net.dropout,
            num_classes: data.num_classes,
        }
    }
}

/// `initial / factor^(number of decay epochs <= e)`.
pub fn lr_schedule(initial: f64, decay_epochs: &[usize], factor: f64, epoch: usize) -> f64 {
    let n = decay_epochs.iter().filter(|&&d| d <= epoch).count();
    initial / factor.powi(n as i32)
}

/// Rendered samples of one manifest, ready for batching.
#[derive(Clone, Debug)]
pub struct Pool {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub patterns: Vec<usize>,
    /// Normalized `[x0, y0, x1, y1]` per sample, zeros when clean.
    pub boxes: Vec<[f32; 4]>,
    pub occluded: Vec<bool>,
    pub per_image: usize,
}

impl Pool {
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self> {
        let cfg = m.config();
        let samples = m.render_all()?;
        let per_image = cfg.channels * cfg.height * cfg.width;
        let mut pool = Pool {
            images: Vec::with_capacity(per_image * samples.len()),
            labels: Vec::with_capacity(samples.len()),
            patterns: Vec::with_capacity(samples.len()),
            boxes: Vec::with_capacity(samples.len()),
            occluded: Vec::with_capacity(samples.len()),
            per_image,
        };
        for s in samples {
            pool.images.extend_from_slice(&s.image.data);
            pool.labels.push(s.identity - cfg.identity_offset);
            pool.patterns.push(s.pattern_label);
            let b = s.bbox.normalized(cfg.width, cfg.height);
            pool.boxes.push(b.map(|v| v as f32));
            pool.occluded.push(!s.bbox.is_empty());
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Training data: a clean pool and an optional occluded pool.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub clean: Pool,
    pub occluded: Option<Pool>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub k: usize,
    pub num_classes: usize,
}

impl TrainData {
    pub fn new(clean: &DatasetManifest, occluded: Option<&DatasetManifest>) -> Result<Self> {
        let c = clean.config();
        if let Some(o) = occluded {
            let oc = o.config();
            let same = (oc.width, oc.height, oc.channels, oc.k, oc.identities, oc.identity_offset)
                == (c.width, c.height, c.channels, c.k, c.identities, c.identity_offset);
            if !same {
                return Err(Error::config(
                    "data.occluded",
                    "occluded manifest differs from the clean one in dims, K or identities",
                ));
            }
        }
        Ok(Self {
            clean: Pool::from_manifest(clean)?,
            occluded: occluded.map(Pool::from_manifest).transpose()?,
            height: c.height,
            width: c.width,
            channels: c.channels,
            k: c.k,
            num_classes: c.identities,
        })
    }

    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let read = |field: &str, p: &Path| {
            DatasetManifest::load(p).map_err(|e| Error::config(field, format!("{}: {e}", p.display())))
        };
        let clean = read("data.clean", &cfg.clean_manifest)?;
        let occluded = match (&cfg.occluded_manifest, cfg.stage) {
            (Some(p), Stage::Finetune) => Some(read("data.occluded", p)?),
            _ => None,
        };
        Self::new(&clean, occluded.as_ref())
    }
}

/// One mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub patterns: Vec<usize>,
    pub boxes: Tensor<f32>,
    pub occluded: Vec<bool>,
}

/// (pool, index) pairs gathered into a batch; occluded picks come first.
fn gather(data: &TrainData, picks: &[(bool, usize)]) -> Batch {
    let n = picks.len();
    let per = data.clean.per_image;
    let mut images = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    let mut patterns = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n * 4);
    let mut occluded = Vec::with_capacity(n);
    for &(occ, i) in picks {
        let pool = if occ {
            data.occluded.as_ref().expect("occluded pool")
        } else {
            &data.clean
        };
        images.extend_from_slice(&pool.images[i * per..(i + 1) * per]);
        labels.push(pool.labels[i]);
        patterns.push(pool.patterns[i]);
        boxes.extend_from_slice(&pool.boxes[i]);
        occluded.push(pool.occluded[i]);
    }
    Batch {
        images: Tensor::from_vec(&[n, data.channels, data.height, data.width], images),
        labels,
        patterns,
        boxes: Tensor::from_vec(&[n, 4], boxes),
        occluded,
    }
}

/// Draw a batch with the given occluded:clean composition, sampling each
/// pool without replacement.
pub fn make_batch(data: &TrainData, mix: MixRatio, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let (n_occ, n_clean) = mix.split(batch_size)?;
    let mut picks = Vec::with_capacity(batch_size);
    if n_occ > 0 {
        let pool = data
            .occluded
            .as_ref()
            .ok_or_else(|| Error::config("data.occluded", "mix asks for occluded samples"))?;
        if pool.len() < n_occ {
            return Err(Error::config("batch_size", "occluded pool smaller than its batch share"));
        }
        let idx = rand::seq::index::sample(rng, pool.len(), n_occ);
        picks.extend(idx.iter().map(|i| (true, i)));
    }
    if n_clean > 0 {
        if data.clean.len() < n_clean {
            return Err(Error::config("batch_size", "clean pool smaller than its batch share"));
        }
        let idx = rand::seq::index::sample(rng, data.clean.len(), n_clean);
        picks.extend(idx.iter().map(|i| (false, i)));
    }
    Ok(gather(data, &picks))
}

/// Per-epoch summary, one JSONL line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub margin_loss: f64,
    pub pattern_loss: f64,
    /// Loss of the epoch's first batch, before its update.
    pub first_loss: f64,
    pub train_acc: f64,
    /// `None` for networks without a pattern head.
    pub pattern_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub margin_loss: f64,
    pub pattern_loss: f64,
    pub correct: usize,
    pub pattern_correct: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint("corrupt RNG position".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub network: NetworkConfig,
    pub train: Option<TrainConfig>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    rng: Option<RngState>,
}

/// Model, optimizer state and bookkeeping as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub network: Network<f32>,
    pub momentum: Option<ParamStore<f32>>,
}

impl Checkpoint {
    /// A model-only checkpoint.
    pub fn from_network(network: &Network<f32>) -> Self {
        Self {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT,
                network: network.config.clone(),
                train: None,
                epoch: 0,
                step: 0,
                rng: None,
            },
            network: network.clone(),
            momentum: None,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut groups = vec![("params".to_string(), self.network.params.clone())];
        if let Some(m) = &self.momentum {
            groups.push(("momentum".to_string(), m.clone()));
        }
        Ok(Container {
            meta: serde_json::to_value(&self.meta)?,
            groups,
        })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("unreadable metadata: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "checkpoint metadata format {} unsupported (expected {CHECKPOINT_FORMAT})",
                meta.format
            )));
        }
        let mut network = Network::<f32>::new(meta.network.clone(), 0)?;
        let params = c
            .group("params")
            .ok_or_else(|| Error::Checkpoint("missing `params` group".into()))?;
        check_same_layout(&network.params, params)?;
        network.params = params.clone();
        let momentum = c.group("momentum").cloned();
        if let Some(m) = &momentum {
            check_momentum_layout(&network.params, m)?;
        }
        Ok(Self {
            meta,
            network,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

fn check_same_layout(expected: &ParamStore<f32>, got: &ParamStore<f32>) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, architecture expects {}",
            got.len(),
            expected.len()
        )));
    }
    for ((n1, t1, _), (n2, t2, _)) in expected.iter().zip(got.iter()) {
        if n1 != n2 || t1.shape() != t2.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{n2}` {:?} does not match architecture tensor `{n1}` {:?}",
                t2.shape(),
                t1.shape()
            )));
        }
    }
    Ok(())
}

/// Momentum mirrors trainable tensors; buffers hold empty placeholders.
fn check_momentum_layout(params: &ParamStore<f32>, got: &ParamStore<f32>) -> Result<()> {
    let bad = || Error::Checkpoint("`momentum` group does not match the parameters".into());
    if params.len() != got.len() {
        return Err(bad());
    }
    for ((n1, t1, trainable), (n2, t2, _)) in params.iter().zip(got.iter()) {
        if n1 != n2 || (trainable && t1.shape() != t2.shape()) {
            return Err(bad());
        }
    }
    Ok(())
}

/// Owns the model, optimizer state and RNG of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub network: Network<f32>,
    momentum: ParamStore<f32>,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochLog>,
}

fn zero_momentum(params: &ParamStore<f32>) -> ParamStore<f32> {
    let mut m = ParamStore::new();
    for (name, t, trainable) in params.iter() {
        if trainable {
            m.add_param(name, Tensor::zeros(t.shape()));
        } else {
            m.add_buffer(name, Tensor::zeros(&[0]));
        }
    }
    m
}

fn check_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::config("stage", format!("expected `{stage:?}` config").to_lowercase()));
    }
    cfg.validate()
}

impl Trainer {
    fn fresh(config: TrainConfig, network: Network<f32>) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            momentum: zero_momentum(&network.params),
            config,
            network,
            rng,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        }
    }

    /// Randomly initialised backbone and embedding head.
    pub fn pretrain(config: TrainConfig, data: &TrainData) -> Result<Self> {
        check_stage(&config, Stage::Pretrain)?;
        let net = Network::new(config.network_config(data), config.net.init_seed)?;
        Ok(Self::fresh(config, net))
    }

    /// Full network initialised from a pretrained backbone.
    pub fn finetune(config: TrainConfig, data: &TrainData, pretrained: &Network<f32>) -> Result<Self> {
        check_stage(&config, Stage::Finetune)?;
        let mut net = Network::new(config.network_config(data), config.net.init_seed)?;
        let copied = net.params.copy_matching(&pretrained.params);
        let missing: Vec<&str> = net
            .params
            .iter()
            .map(|e| e.0)
            .filter(|n| !Network::<f32>::is_mask_branch(n) && !copied.iter().any(|c| c == n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "pretrained checkpoint incompatible with config: {} tensors missing or reshaped (first: `{}`)",
                missing.len(),
                missing[0]
            )));
        }
        Ok(Self::fresh(config, net))
    }

    /// Continue a run from one of its own checkpoints.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let config = ckpt
            .meta
            .train
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let rng = ckpt
            .meta
            .rng
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no RNG state".into()))?
            .restore()?;
        let momentum = ckpt
            .momentum
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
        Ok(Self {
            config,
            network: ckpt.network,
            momentum,
            rng,
            epoch: ckpt.meta.epoch,
            step: ckpt.meta.step,
            history: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT,
                network: self.network.config.clone(),
                train: Some(self.config.clone()),
                epoch: self.epoch,
                step: self.step,
                rng: Some(RngState::capture(&self.rng)),
            },
            network: self.network.clone(),
            momentum: Some(self.momentum.clone()),
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Steps per epoch: one pass over the primary pool (clean when
    /// pretraining, occluded when finetuning with occluded samples).
    pub fn steps_per_epoch(&self, data: &TrainData) -> Result<usize> {
        let (primary, per_batch) = self.primary(data)?;
        Ok((primary.len() / per_batch).max(1))
    }

    fn primary<'a>(&self, data: &'a TrainData) -> Result<(&'a Pool, usize)> {
        let c = &self.config;
        match c.stage {
            Stage::Pretrain => Ok((&data.clean, c.batch_size)),
            Stage::Finetune => {
                let (n_occ, n_clean) = c.mix.split(c.batch_size)?;
                if n_occ > 0 {
                    let pool = data
                        .occluded
                        .as_ref()
                        .ok_or_else(|| Error::config("data.occluded", "no occluded pool loaded"))?;
                    Ok((pool, n_occ))
                } else {
                    Ok((&data.clean, n_clean))
                }
            }
        }
    }

    /// Run one epoch and return its log line.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochLog> {
        let c = self.config.clone();
        let (n_occ, n_clean) = match c.stage {
            Stage::Pretrain => (0, c.batch_size),
            Stage::Finetune => c.mix.split(c.batch_size)?,
        };
        let steps = self.steps_per_epoch(data)?;
        let occ_len = data.occluded.as_ref().map_or(0, Pool::len);
        if n_occ > 0 && occ_len < n_occ {
            return Err(Error::config("batch_size", "occluded pool smaller than its batch share"));
        }
        if n_clean > 0 && data.clean.len() < n_clean {
            return Err(Error::config("batch_size", "clean pool smaller than its batch share"));
        }
        let mut occ_perm: Vec<usize> = (0..occ_len).collect();
        let mut clean_perm: Vec<usize> = (0..data.clean.len()).collect();
        occ_perm.shuffle(&mut self.rng);
        clean_perm.shuffle(&mut self.rng);

        let lr = c.lr_at(self.epoch);
        let mut total = StepStats::default();
        let mut first_loss = f64::NAN;
        for t in 0..steps {
            let mut picks = Vec::with_capacity(c.batch_size);
            picks.extend((0..n_occ).map(|j| (true, occ_perm[(t * n_occ + j) % occ_len])));
            picks.extend((0..n_clean).map(|j| (false, clean_perm[(t * n_clean + j) % clean_perm.len()])));
            let batch = gather(data, &picks);
            let s = self.train_step(&batch, lr)?;
            if t == 0 {
                first_loss = s.loss;
            }
            let w = s.count as f64;
            total.loss += s.loss * w;
            total.margin_loss += s.margin_loss * w;
            total.pattern_loss += s.pattern_loss * w;
            total.correct += s.correct;
            total.pattern_correct += s.pattern_correct;
            total.count += s.count;
        }
        self.epoch += 1;
        let n = total.count as f64;
        let log = EpochLog {
            stage: c.stage,
            epoch: self.epoch,
            step: self.step,
            lr,
            loss: total.loss / n,
            margin_loss: total.margin_loss / n,
            pattern_loss: total.pattern_loss / n,
            first_loss,
            train_acc: total.correct as f64 / n,
            pattern_acc: (self.network.config.has_mask()
                && self.network.config.pattern_head == PatternHead::Classify)
                .then(|| total.pattern_correct as f64 / n),
        };
        self.history.push(log.clone());
        Ok(log)
    }

    /// Forward, backward and one SGD update.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<StepStats> {
        let c = &self.config;
        let lambda = c.effective_lambda();
        let (loss, grads) = loss_and_grads(&self.network, batch, &c.margin, lambda, &mut self.rng)?;
        let (stats, mut grads, moments) = (loss.stats, grads.grads, grads.moments);
        if !stats.loss.is_finite() {
            return Err(Error::invalid(format!("non-finite loss at step {}", self.step)));
        }
        if let Some(clip) = c.grad_clip {
            let norm: f64 = grads
                .iter()
                .flatten()
                .flat_map(|g| g.data())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = (clip / norm) as f32;
                for g in grads.iter_mut().flatten() {
                    g.data_mut().iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        sgd_update(
            &mut self.network.params,
            &mut self.momentum,
            &grads,
            lr as f32,
            c.momentum as f32,
            c.weight_decay as f32,
        );
        self.network.update_running_stats(&moments);
        self.step += 1;
        Ok(stats)
    }

    /// Run the remaining epochs, writing the JSONL log and per-epoch
    /// checkpoints into `out_dir` when configured.
    pub fn run(&mut self, data: &TrainData) -> Result<()> {
        self.run_with(data, |_| {})
    }

    /// [`Trainer::run`] with a callback after every epoch.
    pub fn run_with(&mut self, data: &TrainData, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        let mut log = match &self.config.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("train_log.jsonl"))?;
                Some(std::io::BufWriter::new(f))
            }
            None => None,
        };
        while !self.is_done() {
            let line = self.run_epoch(data)?;
            on_epoch(&line);
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &line)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            if let Some(dir) = &self.config.out_dir {
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join(format!("epoch_{:03}.ckpt", self.epoch)))?;
                ckpt.save(&dir.join("last.ckpt"))?;
            }
        }
        Ok(())
    }
}

/// Loss values of one step.
pub struct StepLoss {
    pub stats: StepStats,
}

/// Gradients per parameter id plus batch-norm moments from the pass.
pub struct StepGrads {
    pub grads: Vec<Option<Tensor<f32>>>,
    pub moments: Vec<(String, crate::autograd::BatchMoments<f32>)>,
}

/// Training-mode forward, total loss, and backward.
pub fn loss_and_grads(
    net: &Network<f32>,
    batch: &Batch,
    margin: &MarginSpec,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(StepLoss, StepGrads)> {
    let mut pass = net.forward(&batch.images, ForwardOptions::train(), Some(rng))?;
    let cls_id = net
        .params
        .id("cls.w")
        .ok_or_else(|| Error::invalid("network has no classifier"))?;
    let g = &mut pass.graph;
    let w = g.param(net.params.by_id(cls_id).clone());
    pass.param_vars[cls_id] = Some(w);
    let en = g.l2_normalize_rows(pass.vars.embedding)?;
    let wn = g.l2_normalize_rows(w)?;
    let cos = g.matmul_nt(en, wn)?;
    let lm = g.margin_loss(cos, &batch.labels, margin)?;

    let n = batch.labels.len();
    let correct = argmax_rows(g.value(cos))
        .iter()
        .zip(&batch.labels)
        .filter(|(a, b)| a == b)
        .count();
    let mut pattern_correct = 0;
    let mut terms = vec![(lm, 1.0f32)];
    let mut lp_value = 0.0;
    if let Some(p) = pass.vars.pattern {
        let lp = match net.config.pattern_head {
            PatternHead::Classify => {
                pattern_correct = argmax_rows(g.value(p))
                    .iter()
                    .zip(&batch.patterns)
                    .filter(|(a, b)| a == b)
                    .count();
                g.softmax_ce(p, &batch.patterns)?
            }
            PatternHead::Regress => g.row_distance(p, &batch.boxes)?,
        };
        lp_value = g.value(lp).item() as f64;
        terms.push((lp, lambda as f32));
    }
    let total = g.weighted_sum(&terms)?;
    let stats = StepStats {
        loss: g.value(total).item() as f64,
        margin_loss: g.value(lm).item() as f64,
        pattern_loss: lp_value,
        correct,
        pattern_correct,
        count: n,
    };
    let mut grads = g.backward(total);
    let per_param = pass
        .param_vars
        .iter()
        .map(|v| v.and_then(|v| grads.take(v)))
        .collect();
    Ok((
        StepLoss { stats },
        StepGrads {
            grads: per_param,
            moments: pass.moments,
        },
    ))
}

/// SGD with momentum and L2 weight decay on `.w` tensors:
/// `v = mu*v + (g + wd*w)`, `w -= lr*v`. Parameters that received no
/// gradient are left untouched.
pub fn sgd_update(
    params: &mut ParamStore<f32>,
    momentum: &mut ParamStore<f32>,
    grads: &[Option<Tensor<f32>>],
    lr: f32,
    mu: f32,
    wd: f32,
) {
    for (id, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if !params.is_trainable(id) {
            continue;
        }
        let decay = if params.name(id).ends_with(".w") { wd } else { 0.0 };
        let v = momentum.by_id_mut(id);
        let w = params.by_id_mut(id);
        for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = mu * *vi + gi + decay * *wi;
            *wi -= lr * *vi;
        }
    }
}

pub fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    let w = t.per_item();
    t.data()
        .chunks(w)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_recipe() {
        let lr = |e| lr_schedule(0.1, &[15, 30], 10.0, e);
        assert_eq!(lr(0), 0.1);
        assert_eq!(lr(14), 0.1);
        assert!((lr(15) - 0.01).abs() < 1e-15);
        assert!((lr(29) - 0.01).abs() < 1e-15);
        assert!((lr(30) - 0.001).abs() < 1e-15);
        assert!((lr(39) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn mix_split() {
        assert_eq!(MixRatio::DEFAULT.split(12).unwrap(), (8, 4));
        assert_eq!("1:0".parse::<MixRatio>().unwrap().split(7).unwrap(), (7, 0));
        let err = MixRatio::DEFAULT.split(32).unwrap_err().to_string();
        assert!(err.contains("batch_size"), "{err}");
        assert!("2-1".parse::<MixRatio>().is_err());
    }

    #[test]
    fn config_validation_names_fields() {
        let kv = KvConfig::parse("stage = pretrain\ndata.clean = c.jsonl\nlr.decay_epochs = 5, 3\n").unwrap();
        let err = TrainConfig::from_kv(&kv, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("lr.decay_epochs"), "{err}");
        let kv = KvConfig::parse("stage = finetune\ndata.clean = c\ndata.occluded = o\nmode = from\nloss.lambda = 0\nbatch_size = 30\n")
            .unwrap();
        let err = TrainConfig::from_kv(&kv, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("loss.lambda"), "{err}");
        let kv = KvConfig::parse("stage = pretrain\n").unwrap();
        let err = TrainConfig::from_kv(&kv, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("data.clean"), "{err}");
    }

    #[test]
    fn effective_settings_per_mode() {
        let mut c = TrainConfig {
            stage: Stage::Finetune,
            ..TrainConfig::default()
        };
        assert_eq!(c.effective_mask_mode(), MaskMode::Conv3d);
        assert_eq!(c.effective_lambda(), 1.0);
        c.mode = BaselineMode::BaselineMd;
        assert_eq!(c.effective_lambda(), 0.0);
        c.mode = BaselineMode::BaselineAug;
        assert_eq!(c.effective_mask_mode(), MaskMode::None);
        c.stage = Stage::Pretrain;
        c.mode = BaselineMode::From;
        assert_eq!(c.effective_mask_mode(), MaskMode::None);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut p = ParamStore::new();
        p.add_param("a.w", Tensor::from_vec(&[2], vec![1.0f32, -2.0]));
        p.add_param("a.b", Tensor::from_vec(&[1], vec![0.5f32]));
        p.add_param("untouched.w", Tensor::from_vec(&[1], vec![3.0f32]));
        let mut m = zero_momentum(&p);
        let grads = vec![
            Some(Tensor::from_vec(&[2], vec![0.1f32, 0.2])),
            Some(Tensor::from_vec(&[1], vec![1.0f32])),
            None,
        ];
        sgd_update(&mut p, &mut m, &grads, 0.1, 0.9, 0.01);
        // v = g + wd*w ; w -= lr*v
        assert!((p.get("a.w").unwrap().data()[0] - (1.0 - 0.1 * (0.1 + 0.01))).abs() < 1e-7);
        assert!((p.get("a.b").unwrap().data()[0] - (0.5 - 0.1)).abs() < 1e-7);
        assert_eq!(p.get("untouched.w").unwrap().data()[0], 3.0);
        sgd_update(&mut p, &mut m, &grads, 0.1, 0.9, 0.0);
        // second step: v = 0.9*1.0 + 1.0
        assert!((p.get("a.b").unwrap().data()[0] - (0.4 - 0.1 * 1.9)).abs() < 1e-6);
    }
}
