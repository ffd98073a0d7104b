//! Flat `key = value` run configuration.
//!
//! Values are layered: preset defaults, then the config file, then `--set`
//! pairs, then dedicated flags. The effective configuration is written next to
//! every output and parses back to the same [`RunConfig`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use lane3d::data::AugmentConfig;
use lane3d::losses::{LossForm, LossWeights};
use lane3d::network::{Experiment, ModelConfig, Scale};
use lane3d::optim::AdamConfig;
use lane3d::postprocess::{NmsWindow, PostprocessConfig};
use serde_json::Value;

use crate::CliError;

pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Experiment,
    pub scale: Scale,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    /// Write an extra checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub augment: bool,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub aug: AugmentConfig,
    pub post: PostprocessConfig,
    /// Evaluation tolerance in frame pixels; `None` scales 20 px at 1280 wide
    /// to the label images.
    pub x_tol: Option<f64>,
    /// Write measured per-clip runtimes into prediction files. Off by default
    /// so prediction files are reproducible.
    pub record_runtime: bool,
}

impl RunConfig {
    pub fn defaults(preset: Experiment, scale: Scale) -> Self {
        let (epochs, batch_size, augment) = match scale {
            Scale::Desk => (125, 4, false),
            Scale::Full => (162, 8, true),
        };
        let mut cfg = Self {
            preset,
            scale,
            seed: 0,
            dataset: None,
            out: PathBuf::from("out"),
            epochs,
            batch_size,
            checkpoint_every: 0,
            augment,
            model: ModelConfig::preset(preset, scale),
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            aug: AugmentConfig::default(),
            post: PostprocessConfig::default(),
            x_tol: None,
            record_runtime: false,
        };
        cfg.reseed(0);
        cfg
    }

    fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.aug.seed = seed;
        self.post.ransac.seed = seed;
    }

    /// Builds a configuration from layered pairs; later pairs win.
    pub fn resolve(pairs: &[(String, String)]) -> Result<Self, CliError> {
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let preset = Experiment::parse(last("preset").unwrap_or("exp3")).map_err(usage)?;
        let scale = Scale::parse(last("scale").unwrap_or("desk")).map_err(usage)?;
        let mut cfg = Self::defaults(preset, scale);
        for (k, v) in pairs {
            cfg.set(k, v).map_err(|m| CliError::usage(format!("config key `{k}`: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(usage)?;
        self.adam.validate().map_err(usage)?;
        self.loss.validate().map_err(usage)?;
        self.aug.validate().map_err(usage)?;
        if self.batch_size == 0 {
            return Err(CliError::usage("train.batch_size must be at least 1"));
        }
        if !(self.post.threshold > 0.0 && self.post.threshold < 1.0) {
            return Err(CliError::usage(format!("post.threshold {} outside (0, 1)", self.post.threshold)));
        }
        if let Some(t) = self.x_tol {
            if !(t > 0.0) {
                return Err(CliError::usage(format!("eval.x_tol {t} must be > 0")));
            }
        }
        Ok(())
    }

    /// Applies one pair. `preset` and `scale` are consumed by [`RunConfig::resolve`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "preset" | "scale" => {}
            "seed" => self.reseed(num(v)?),
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            "train.epochs" => self.epochs = num(v)?,
            "train.batch_size" => self.batch_size = num(v)?,
            "train.checkpoint_every" => self.checkpoint_every = num(v)?,
            "train.augment" => self.augment = num(v)?,
            "optim.lr" => self.adam.lr = num(v)?,
            "optim.beta1" => self.adam.beta1 = num(v)?,
            "optim.beta2" => self.adam.beta2 = num(v)?,
            "optim.eps" => self.adam.eps = num(v)?,
            "loss.w_focal" => self.loss.w_focal = num(v)?,
            "loss.w_offset" => self.loss.w_offset = num(v)?,
            "loss.w_lineiou" => self.loss.w_lineiou = num(v)?,
            "loss.w_embed" => self.loss.w_embed = num(v)?,
            "loss.focal_alpha" => self.loss.alpha = num(v)?,
            "loss.focal_gamma" => self.loss.gamma = num(v)?,
            "loss.lineiou_e" => self.loss.lineiou_e = num(v)?,
            "loss.lineiou_window" => self.loss.lineiou_window = num(v)?,
            "loss.delta_pull" => self.loss.delta_pull = num(v)?,
            "loss.delta_push" => self.loss.delta_push = num(v)?,
            "loss.form" => {
                self.loss.form = match v {
                    "per_variant" => LossForm::PerVariant,
                    "combined" => LossForm::Combined,
                    other => return Err(format!("`{other}` is not per_variant or combined")),
                }
            }
            "aug.flip_prob" => self.aug.flip_prob = num(v)?,
            "aug.brightness" => self.aug.brightness = num(v)?,
            "aug.noise_sigma" => self.aug.noise_sigma = num(v)?,
            "aug.rotation_deg" => self.aug.rotation_deg = num(v)?,
            "post.threshold" => self.post.threshold = num(v)?,
            "post.nms" => self.post.nms = NmsWindow::parse(v).map_err(|e| e.to_string())?,
            "post.cluster_px" => self.post.cluster_px = num(v)?,
            "post.embed_weight" => self.post.embed_weight = num(v)?,
            "post.min_points" => self.post.min_points = num(v)?,
            "post.ransac_iters" => self.post.ransac.iters = num(v)?,
            "post.ransac_tol" => self.post.ransac.inlier_tol = num(v)?,
            "post.ransac_min_inliers" => self.post.ransac.min_inliers = num(v)?,
            "post.lambda" => self.post.lambda = num(v)?,
            "eval.x_tol" => self.x_tol = if v == "auto" { None } else { Some(num(v)?) },
            "infer.record_runtime" => self.record_runtime = num(v)?,
            k => match k.strip_prefix("model.") {
                Some(path) => self.model = patch_model(&self.model, path, v)?,
                None => return Err("unknown key".into()),
            },
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put("preset", self.preset.name().into());
        put(
            "scale",
            match self.scale {
                Scale::Desk => "desk".into(),
                Scale::Full => "full".into(),
            },
        );
        put("seed", self.seed.to_string());
        put("dataset", self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        put("out", self.out.display().to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.checkpoint_every", self.checkpoint_every.to_string());
        put("train.augment", self.augment.to_string());
        put("optim.lr", self.adam.lr.to_string());
        put("optim.beta1", self.adam.beta1.to_string());
        put("optim.beta2", self.adam.beta2.to_string());
        put("optim.eps", self.adam.eps.to_string());
        let l = &self.loss;
        put("loss.w_focal", l.w_focal.to_string());
        put("loss.w_offset", l.w_offset.to_string());
        put("loss.w_lineiou", l.w_lineiou.to_string());
        put("loss.w_embed", l.w_embed.to_string());
        put("loss.focal_alpha", l.alpha.to_string());
        put("loss.focal_gamma", l.gamma.to_string());
        put("loss.lineiou_e", l.lineiou_e.to_string());
        put("loss.lineiou_window", l.lineiou_window.to_string());
        put("loss.delta_pull", l.delta_pull.to_string());
        put("loss.delta_push", l.delta_push.to_string());
        put(
            "loss.form",
            match l.form {
                LossForm::PerVariant => "per_variant".into(),
                LossForm::Combined => "combined".into(),
            },
        );
        put("aug.flip_prob", self.aug.flip_prob.to_string());
        put("aug.brightness", self.aug.brightness.to_string());
        put("aug.noise_sigma", self.aug.noise_sigma.to_string());
        put("aug.rotation_deg", self.aug.rotation_deg.to_string());
        let p = &self.post;
        put("post.threshold", p.threshold.to_string());
        put("post.nms", p.nms.name().into());
        put("post.cluster_px", p.cluster_px.to_string());
        put("post.embed_weight", p.embed_weight.to_string());
        put("post.min_points", p.min_points.to_string());
        put("post.ransac_iters", p.ransac.iters.to_string());
        put("post.ransac_tol", p.ransac.inlier_tol.to_string());
        put("post.ransac_min_inliers", p.ransac.min_inliers.to_string());
        put("post.lambda", p.lambda.to_string());
        put("eval.x_tol", self.x_tol.map_or_else(|| "auto".into(), |t| t.to_string()));
        put("infer.record_runtime", self.record_runtime.to_string());
        for (k, v) in self.model.flat() {
            e.push((format!("model.{k}"), v));
        }
        e
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.render()).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

fn usage(e: lane3d::Error) -> CliError {
    CliError::usage(e.to_string())
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("`{v}`: {e}"))
}

/// Replaces one leaf of the serialized model config. Values are read as JSON,
/// falling back to a bare string (`model.encoder.variant = Network2`).
fn patch_model(model: &ModelConfig, path: &str, value: &str) -> Result<ModelConfig, String> {
    let mut tree = serde_json::to_value(model).map_err(|e| e.to_string())?;
    let mut node = &mut tree;
    for part in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| "unknown key".to_string())?;
    }
    if node.is_object() {
        return Err("names a group, not a value".into());
    }
    *node = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    serde_json::from_value(tree).map_err(|e| format!("`{value}`: {e}"))
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(split_pair(line).map_err(|m| CliError::usage(format!("{origin}:{}: {m}", i + 1)))?);
    }
    Ok(out)
}

pub fn split_pair(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key = value, got `{s}`"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in `{s}`"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}
