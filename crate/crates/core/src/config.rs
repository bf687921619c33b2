//! Run configuration: flat `key = value` lines with dotted section prefixes.
//!
//! ```text
//! # comment
//! train.epochs = 100
//! model.hidden_dims = 128,64
//! seed.master = 7
//! ```
//!
//! Keys left at `auto` are filled in by [`RunConfig::resolved`]. The resolved
//! text written into a run directory reproduces the run exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::augment::AugmentPolicy;
use crate::autodiff::ImageGeom;
use crate::data::{gen_gaussian_mixture, gen_pattern_images, read_cifar_binary, read_csv, LabeledDataset, SampleShape};
use crate::error::{Error, Result};
use crate::eval::Stage;
use crate::nn::{EncoderConfig, ModelConfig, PredictorConfig, ProjectorConfig};
use crate::seed::derive_seed;
use crate::train::TrainConfig;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    GaussianMixture,
    PatternImages,
    Cifar,
    Csv,
}

impl DataKind {
    pub fn name(self) -> &'static str {
        match self {
            DataKind::GaussianMixture => "gaussian_mixture",
            DataKind::PatternImages => "pattern_images",
            DataKind::Cifar => "cifar",
            DataKind::Csv => "csv",
        }
    }
}

impl FromStr for DataKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [
            DataKind::GaussianMixture,
            DataKind::PatternImages,
            DataKind::Cifar,
            DataKind::Csv,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| "expected gaussian_mixture, pattern_images, cifar or csv".to_string())
    }
}

/// Where samples come from. Synthetic kinds use the generator fields,
/// file kinds use `path`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub kind: DataKind,
    pub path: String,
    pub num_classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub image: ImageGeom,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            kind: DataKind::GaussianMixture,
            path: String::new(),
            num_classes: 4,
            n_per_class: 256,
            dim: 16,
            separation: 4.0,
            image: ImageGeom {
                channels: 3,
                height: 16,
                width: 16,
            },
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn load(&self) -> Result<LabeledDataset> {
        match self.kind {
            DataKind::GaussianMixture => {
                gen_gaussian_mixture(self.num_classes, self.n_per_class, self.dim, self.separation, self.seed)
            }
            DataKind::PatternImages => gen_pattern_images(self.num_classes, self.n_per_class, self.image, self.seed),
            DataKind::Cifar => {
                // The format always allows ten labels; evaluation wants the
                // classes that actually occur.
                let ds = read_cifar_binary(self.file()?)?;
                let k = ds.labels().iter().max().map_or(1, |&m| m + 1);
                LabeledDataset::new(ds.samples().clone(), ds.labels().to_vec(), k)
            }
            DataKind::Csv => read_csv(self.file()?),
        }
    }

    fn file(&self) -> Result<&str> {
        if self.path.is_empty() {
            return Err(Error::config("data.path", format!("required for data.kind = {}", self.kind.name())));
        }
        Ok(&self.path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub hidden_dims: Vec<usize>,
    pub backbone_dim: usize,
    pub use_conv: bool,
    pub conv_channels: [usize; 2],
    pub latent_dim: usize,
    /// `None` means "same as the batch size".
    pub projector_hidden: Option<usize>,
    pub predictor_hidden: Option<usize>,
    pub num_features: Option<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden_dims: vec![128],
            backbone_dim: 64,
            use_conv: false,
            conv_channels: [8, 16],
            latent_dim: 32,
            projector_hidden: None,
            predictor_hidden: None,
            num_features: None,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

/// The three named seed streams; unset streams derive from `master`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedSpec {
    pub master: u64,
    pub init: Option<u64>,
    pub augment: Option<u64>,
    pub shuffle: Option<u64>,
}

impl Default for SeedSpec {
    fn default() -> Self {
        Self {
            master: DEFAULT_SEED,
            init: None,
            augment: None,
            shuffle: None,
        }
    }
}

impl SeedSpec {
    pub fn init(&self) -> u64 {
        self.init.unwrap_or_else(|| derive_seed(self.master, 1))
    }

    pub fn augment(&self) -> u64 {
        self.augment.unwrap_or_else(|| derive_seed(self.master, 2))
    }

    pub fn shuffle(&self) -> u64 {
        self.shuffle.unwrap_or_else(|| derive_seed(self.master, 3))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub stages: Vec<Stage>,
    pub kmeans_seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            stages: vec![Stage::Backbone, Stage::FinalOutput],
            kmeans_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: String,
    pub data: DataSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
    pub seeds: SeedSpec,
    pub eval: EvalSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: "run".to_string(),
            data: DataSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            augment: AugmentPolicy::default(),
            seeds: SeedSpec::default(),
            eval: EvalSpec::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

fn parse_auto<V: FromStr>(key: &str, value: &str) -> Result<Option<V>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_geom(key: &str, value: &str) -> Result<ImageGeom> {
    let parts: Vec<usize> = value
        .split('x')
        .map(|s| parse(key, s.trim()))
        .collect::<Result<_>>()?;
    match parts[..] {
        [channels, height, width] => Ok(ImageGeom {
            channels,
            height,
            width,
        }),
        _ => Err(Error::config(key, "expected CxHxW")),
    }
}

fn show_auto<V: ToString>(v: &Option<V>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), |v| v.to_string())
}

fn show_list<V: ToString>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

const ALIASES: [(&str, &str); 5] = [
    ("epochs", "train.epochs"),
    ("seed", "seed.master"),
    ("lr", "train.lr"),
    ("batch-size", "train.batch_size"),
    ("out", "run.out_dir"),
];

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {}: expected `key = value`", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Applies `--key value` style overrides. Keys may be dotted config keys
    /// or one of the short aliases (`epochs`, `seed`, `lr`, `batch-size`,
    /// `out`).
    pub fn apply_overrides<K: AsRef<str>, V: AsRef<str>>(&mut self, overrides: &[(K, V)]) -> Result<()> {
        for (k, v) in overrides {
            let k = k.as_ref().trim_start_matches('-');
            let key = ALIASES.iter().find(|(a, _)| *a == k).map_or(k, |(_, full)| full);
            self.set(key, v.as_ref().trim())?;
        }
        Ok(())
    }

    /// Sets one key. Unknown keys are rejected with the key name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (d, m, t, a) = (&mut self.data, &mut self.model, &mut self.train, &mut self.augment);
        match key {
            "run.out_dir" => self.out_dir = value.to_string(),

            "data.kind" => d.kind = value.parse().map_err(|m: String| Error::config(key, m))?,
            "data.path" => d.path = value.to_string(),
            "data.num_classes" => d.num_classes = parse(key, value)?,
            "data.n_per_class" => d.n_per_class = parse(key, value)?,
            "data.dim" => d.dim = parse(key, value)?,
            "data.separation" => d.separation = parse(key, value)?,
            "data.image" => d.image = parse_geom(key, value)?,
            "data.seed" => d.seed = parse(key, value)?,

            "model.hidden_dims" => m.hidden_dims = parse_list(key, value)?,
            "model.backbone_dim" => m.backbone_dim = parse(key, value)?,
            "model.use_conv" => m.use_conv = parse_bool(key, value)?,
            "model.conv_channels" => {
                let v: Vec<usize> = parse_list(key, value)?;
                m.conv_channels = v
                    .try_into()
                    .map_err(|_| Error::config(key, "expected two channel counts"))?;
            }
            "model.latent_dim" => m.latent_dim = parse(key, value)?,
            "model.projector_hidden" => m.projector_hidden = parse_auto(key, value)?,
            "model.predictor_hidden" => m.predictor_hidden = parse_auto(key, value)?,
            "model.num_features" => m.num_features = parse_auto(key, value)?,
            "model.bn_momentum" => m.bn_momentum = parse(key, value)?,
            "model.bn_eps" => m.bn_eps = parse(key, value)?,

            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.tau_inst" => t.tau_inst = parse(key, value)?,
            "train.tau_feat" => t.tau_feat = parse(key, value)?,
            "train.alpha" => t.alpha = parse(key, value)?,
            "train.grad_clip_norm" => t.grad_clip_norm = parse(key, value)?,
            "train.use_scheduler" => t.use_scheduler = parse_bool(key, value)?,
            "train.use_clipping" => t.use_clipping = parse_bool(key, value)?,
            "train.use_feature_head" => t.use_feature_head = parse_bool(key, value)?,
            "train.use_entropy_loss" => t.use_entropy_loss = parse_bool(key, value)?,
            "train.dual_view" => t.dual_view = parse_bool(key, value)?,

            "augment.crop.enabled" => a.crop.enabled = parse_bool(key, value)?,
            "augment.crop.scale_min" => a.crop.scale_min = parse(key, value)?,
            "augment.crop.scale_max" => a.crop.scale_max = parse(key, value)?,
            "augment.hflip_prob" => a.hflip_prob = parse(key, value)?,
            "augment.jitter.brightness" => a.color_jitter.brightness = parse(key, value)?,
            "augment.jitter.contrast" => a.color_jitter.contrast = parse(key, value)?,
            "augment.jitter.saturation" => a.color_jitter.saturation = parse(key, value)?,
            "augment.jitter.apply_prob" => a.color_jitter.apply_prob = parse(key, value)?,
            "augment.grayscale_prob" => a.grayscale_prob = parse(key, value)?,
            "augment.blur.enabled" => a.blur.enabled = parse_bool(key, value)?,
            "augment.blur.kernel_size" => a.blur.kernel_size = parse(key, value)?,
            "augment.blur.sigma_min" => a.blur.sigma_min = parse(key, value)?,
            "augment.blur.sigma_max" => a.blur.sigma_max = parse(key, value)?,
            "augment.vector.noise_sigma" => a.vector_noise_sigma = parse(key, value)?,
            "augment.vector.dropout_prob" => a.vector_dropout_prob = parse(key, value)?,

            "seed.master" => self.seeds.master = parse(key, value)?,
            "seed.init" => self.seeds.init = parse_auto(key, value)?,
            "seed.augment" => self.seeds.augment = parse_auto(key, value)?,
            "seed.shuffle" => self.seeds.shuffle = parse_auto(key, value)?,

            "eval.stages" => {
                self.eval.stages = value
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|m: String| Error::config(key, m)))
                    .collect::<Result<_>>()?
            }
            "eval.kmeans_seed" => self.eval.kmeans_seed = parse(key, value)?,

            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (d, m, t, a, s) = (&self.data, &self.model, &self.train, &self.augment, &self.seeds);
        vec![
            ("run.out_dir", self.out_dir.clone()),
            ("data.kind", d.kind.name().to_string()),
            ("data.path", d.path.clone()),
            ("data.num_classes", d.num_classes.to_string()),
            ("data.n_per_class", d.n_per_class.to_string()),
            ("data.dim", d.dim.to_string()),
            ("data.separation", d.separation.to_string()),
            (
                "data.image",
                format!("{}x{}x{}", d.image.channels, d.image.height, d.image.width),
            ),
            ("data.seed", d.seed.to_string()),
            ("model.hidden_dims", show_list(&m.hidden_dims)),
            ("model.backbone_dim", m.backbone_dim.to_string()),
            ("model.use_conv", m.use_conv.to_string()),
            ("model.conv_channels", show_list(&m.conv_channels)),
            ("model.latent_dim", m.latent_dim.to_string()),
            ("model.projector_hidden", show_auto(&m.projector_hidden)),
            ("model.predictor_hidden", show_auto(&m.predictor_hidden)),
            ("model.num_features", show_auto(&m.num_features)),
            ("model.bn_momentum", m.bn_momentum.to_string()),
            ("model.bn_eps", m.bn_eps.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.tau_inst", t.tau_inst.to_string()),
            ("train.tau_feat", t.tau_feat.to_string()),
            ("train.alpha", t.alpha.to_string()),
            ("train.grad_clip_norm", t.grad_clip_norm.to_string()),
            ("train.use_scheduler", t.use_scheduler.to_string()),
            ("train.use_clipping", t.use_clipping.to_string()),
            ("train.use_feature_head", t.use_feature_head.to_string()),
            ("train.use_entropy_loss", t.use_entropy_loss.to_string()),
            ("train.dual_view", t.dual_view.to_string()),
            ("augment.crop.enabled", a.crop.enabled.to_string()),
            ("augment.crop.scale_min", a.crop.scale_min.to_string()),
            ("augment.crop.scale_max", a.crop.scale_max.to_string()),
            ("augment.hflip_prob", a.hflip_prob.to_string()),
            ("augment.jitter.brightness", a.color_jitter.brightness.to_string()),
            ("augment.jitter.contrast", a.color_jitter.contrast.to_string()),
            ("augment.jitter.saturation", a.color_jitter.saturation.to_string()),
            ("augment.jitter.apply_prob", a.color_jitter.apply_prob.to_string()),
            ("augment.grayscale_prob", a.grayscale_prob.to_string()),
            ("augment.blur.enabled", a.blur.enabled.to_string()),
            ("augment.blur.kernel_size", a.blur.kernel_size.to_string()),
            ("augment.blur.sigma_min", a.blur.sigma_min.to_string()),
            ("augment.blur.sigma_max", a.blur.sigma_max.to_string()),
            ("augment.vector.noise_sigma", a.vector_noise_sigma.to_string()),
            ("augment.vector.dropout_prob", a.vector_dropout_prob.to_string()),
            ("seed.master", s.master.to_string()),
            ("seed.init", show_auto(&s.init)),
            ("seed.augment", show_auto(&s.augment)),
            ("seed.shuffle", show_auto(&s.shuffle)),
            ("eval.stages", show_list(&self.eval.stages.iter().map(|s| s.name()).collect::<Vec<_>>())),
            ("eval.kmeans_seed", self.eval.kmeans_seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let head = k.split('.').next().unwrap_or("");
            if head != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                section = head;
            }
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Copy with every `auto` value replaced by what it stands for.
    pub fn resolved(&self) -> Self {
        let mut r = self.clone();
        let n = r.train.batch_size;
        r.model.projector_hidden.get_or_insert(n);
        r.model.predictor_hidden.get_or_insert(n);
        r.model.num_features.get_or_insert(n);
        r.seeds = SeedSpec {
            master: r.seeds.master,
            init: Some(r.seeds.init()),
            augment: Some(r.seeds.augment()),
            shuffle: Some(r.seeds.shuffle()),
        };
        r
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        if self.eval.stages.is_empty() {
            return Err(Error::config("eval.stages", "at least one stage required"));
        }
        Ok(())
    }

    /// Network layout for samples of `shape`, with `auto` widths taken from
    /// the batch size.
    pub fn model_config(&self, shape: SampleShape) -> Result<ModelConfig> {
        let m = &self.model;
        let n = self.train.batch_size;
        if m.use_conv && shape.image().is_none() {
            return Err(Error::config("model.use_conv", "requires image samples"));
        }
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                input_dim: shape.len(),
                hidden_dims: m.hidden_dims.clone(),
                output_dim: m.backbone_dim,
                use_conv: m.use_conv,
                image: shape.image(),
                conv_channels: m.conv_channels,
            },
            projector: ProjectorConfig {
                in_dim: m.backbone_dim,
                hidden_dim: m.projector_hidden.unwrap_or(n),
                out_dim: m.latent_dim,
            },
            predictor: PredictorConfig {
                in_dim: m.latent_dim,
                hidden_dim: m.predictor_hidden.unwrap_or(n),
                num_features: m.num_features.unwrap_or(n),
            },
            bn_momentum: m.bn_momentum,
            bn_eps: m.bn_eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
