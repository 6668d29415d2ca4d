use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hand_prior::{synthetic, HandTemplate};
use crate::problosses::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Supervised,
    Weak,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "weak" => Ok(Mode::Weak),
            other => Err(Error::parse(
                "mode",
                format!("`{other}` is not supervised|weak"),
            )),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Supervised => "supervised",
            Mode::Weak => "weak",
        })
    }
}

/// Everything a run depends on. Serialized as flat `key = value` lines.
///
/// `template` is `synthetic` (bundled 162-vertex hand), `toy` (12 vertices)
/// or a path to a template JSON file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub template: String,
    pub image_size: usize,
    pub encoder_widths: Vec<usize>,
    pub feature_dim: usize,
    pub attention_key: usize,
    pub attention_value: usize,
    pub head_hidden: usize,
    /// Init scale of the rest-coordinate rows in the vertex head's first layer.
    pub position_gain: f64,
    pub prior_hidden: usize,
    pub camera_hidden: usize,
    pub texture: bool,
    pub texture_hidden: usize,
    pub w_vertex: f64,
    pub w_joint: f64,
    pub w_camera: f64,
    pub w_joint2d: f64,
    pub w_texture: f64,
    pub kl_weight: f64,
    pub prior_variance: f64,
    pub logvar_init: f64,
    pub learning_rate: f64,
    /// Anneal the learning rate to zero on a half cosine over `steps`.
    pub cosine_decay: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub latent_samples: usize,
    pub pose_std: f64,
    pub shape_std: f64,
    pub max_occluders: usize,
    pub mm_per_unit: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            template: "synthetic".into(),
            image_size: 64,
            encoder_widths: vec![8, 16, 32, 32],
            feature_dim: 64,
            attention_key: 32,
            attention_value: 32,
            head_hidden: 128,
            position_gain: 60.0,
            prior_hidden: 128,
            camera_hidden: 64,
            texture: false,
            texture_hidden: 64,
            w_vertex: 1.0,
            w_joint: 1.0,
            w_camera: 1.0,
            w_joint2d: 1.0,
            w_texture: 1.0,
            kl_weight: 1.0,
            prior_variance: 0.01,
            logvar_init: -6.0,
            learning_rate: 2e-3,
            cosine_decay: true,
            steps: 2000,
            batch_size: 4,
            seed: 0,
            mode: Mode::Supervised,
            latent_samples: 1,
            pose_std: 0.3,
            shape_std: 0.5,
            max_occluders: 1,
            mm_per_unit: 100.0,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e: T::Err| Error::parse(key, format!("`{v}`: {e}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::parse(key, format!("`{v}` is not a boolean"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("line", format!("{}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "template" => self.template = v.to_string(),
            "image_size" => self.image_size = num(key, v)?,
            "encoder_widths" => {
                self.encoder_widths = v
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "feature_dim" => self.feature_dim = num(key, v)?,
            "attention_key" => self.attention_key = num(key, v)?,
            "attention_value" => self.attention_value = num(key, v)?,
            "head_hidden" => self.head_hidden = num(key, v)?,
            "position_gain" => self.position_gain = num(key, v)?,
            "prior_hidden" => self.prior_hidden = num(key, v)?,
            "camera_hidden" => self.camera_hidden = num(key, v)?,
            "texture" => self.texture = flag(key, v)?,
            "texture_hidden" => self.texture_hidden = num(key, v)?,
            "w_vertex" => self.w_vertex = num(key, v)?,
            "w_joint" => self.w_joint = num(key, v)?,
            "w_camera" => self.w_camera = num(key, v)?,
            "w_joint2d" => self.w_joint2d = num(key, v)?,
            "w_texture" => self.w_texture = num(key, v)?,
            "kl_weight" => self.kl_weight = num(key, v)?,
            "prior_variance" => self.prior_variance = num(key, v)?,
            "logvar_init" => self.logvar_init = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "cosine_decay" => self.cosine_decay = flag(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "mode" => self.mode = v.parse()?,
            "latent_samples" => self.latent_samples = num(key, v)?,
            "pose_std" => self.pose_std = num(key, v)?,
            "shape_std" => self.shape_std = num(key, v)?,
            "max_occluders" => self.max_occluders = num(key, v)?,
            "mm_per_unit" => self.mm_per_unit = num(key, v)?,
            other => return Err(Error::parse(other, "unknown key")),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.encoder_widths.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("template", self.template.clone());
        kv("image_size", self.image_size.to_string());
        kv("encoder_widths", widths.join(","));
        kv("feature_dim", self.feature_dim.to_string());
        kv("attention_key", self.attention_key.to_string());
        kv("attention_value", self.attention_value.to_string());
        kv("head_hidden", self.head_hidden.to_string());
        kv("position_gain", format!("{:?}", self.position_gain));
        kv("prior_hidden", self.prior_hidden.to_string());
        kv("camera_hidden", self.camera_hidden.to_string());
        kv("texture", self.texture.to_string());
        kv("texture_hidden", self.texture_hidden.to_string());
        kv("w_vertex", format!("{:?}", self.w_vertex));
        kv("w_joint", format!("{:?}", self.w_joint));
        kv("w_camera", format!("{:?}", self.w_camera));
        kv("w_joint2d", format!("{:?}", self.w_joint2d));
        kv("w_texture", format!("{:?}", self.w_texture));
        kv("kl_weight", format!("{:?}", self.kl_weight));
        kv("prior_variance", format!("{:?}", self.prior_variance));
        kv("logvar_init", format!("{:?}", self.logvar_init));
        kv("learning_rate", format!("{:?}", self.learning_rate));
        kv("cosine_decay", self.cosine_decay.to_string());
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("mode", self.mode.to_string());
        kv("latent_samples", self.latent_samples.to_string());
        kv("pose_std", format!("{:?}", self.pose_std));
        kv("shape_std", format!("{:?}", self.shape_std));
        kv("max_occluders", self.max_occluders.to_string());
        kv("mm_per_unit", format!("{:?}", self.mm_per_unit));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("feature_dim", self.feature_dim),
            ("attention_key", self.attention_key),
            ("attention_value", self.attention_value),
            ("head_hidden", self.head_hidden),
            ("prior_hidden", self.prior_hidden),
            ("camera_hidden", self.camera_hidden),
            ("texture_hidden", self.texture_hidden),
            ("batch_size", self.batch_size),
            ("latent_samples", self.latent_samples),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config(
                "encoder_widths must be non-empty and positive".into(),
            ));
        }
        let stride = 1usize << (self.encoder_widths.len() - 1);
        if self.image_size % stride != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by encoder stride {stride}",
                self.image_size
            )));
        }
        for (k, v) in [
            ("w_vertex", self.w_vertex),
            ("w_joint", self.w_joint),
            ("w_camera", self.w_camera),
            ("w_joint2d", self.w_joint2d),
            ("w_texture", self.w_texture),
            ("kl_weight", self.kl_weight),
            ("pose_std", self.pose_std),
            ("shape_std", self.shape_std),
            ("position_gain", self.position_gain),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{k} must be finite and non-negative"
                )));
            }
        }
        for (k, v) in [
            ("prior_variance", self.prior_variance),
            ("learning_rate", self.learning_rate),
            ("mm_per_unit", self.mm_per_unit),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !self.logvar_init.is_finite() {
            return Err(Error::Config("logvar_init must be finite".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            vertex: self.w_vertex,
            joint: self.w_joint,
            camera: self.w_camera,
            joint2d: self.w_joint2d,
            texture: self.w_texture,
            kl: self.kl_weight,
        }
    }

    pub fn load_template(&self) -> Result<HandTemplate> {
        match self.template.as_str() {
            "synthetic" => Ok(synthetic::paddle_hand()),
            "toy" => Ok(synthetic::toy_hand()),
            path => HandTemplate::load(path),
        }
    }
}
