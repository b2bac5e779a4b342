use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::prompting::{parse_controller_config, ControllerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mvgen,
    Gen3d,
    Eval,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Mvgen => "mvgen",
            Mode::Gen3d => "gen3d",
            Mode::Eval => "eval",
        })
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: Mode,
    pub seed: u64,
    /// Canonical controller config string.
    pub config: String,
    /// Front image for generation, prompt image for evaluation.
    pub image: PathBuf,
    pub out: PathBuf,
    /// Prefix of per-view file names.
    pub name: String,
    pub text: String,
    /// Side of generated images; latents are a quarter of this.
    pub image_size: usize,
    pub steps: usize,
    pub iters: usize,
    pub guidance_scale: f64,
    pub weights_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_views: Option<PathBuf>,
    /// Scored images for `eval`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// Replace the denoiser by a pull toward the front image in `gen3d`.
    #[serde(default)]
    pub mock_guidance: bool,
}

impl RunManifest {
    pub const DEFAULT_TEXT: &'static str = "an object";

    /// Defaults for everything except the required fields.
    pub fn new(mode: Mode, config: &str, image: impl Into<PathBuf>, out: impl Into<PathBuf>, seed: u64) -> Result<Self> {
        let image = image.into();
        let name = image
            .file_stem()
            .and_then(|s| s.to_str())
            .filter(|s| !s.is_empty())
            .unwrap_or("run")
            .to_string();
        let m = Self {
            mode,
            seed,
            config: parse_controller_config(config)?.to_string(),
            image,
            out: out.into(),
            name,
            text: Self::DEFAULT_TEXT.into(),
            image_size: 32,
            steps: 10,
            iters: 100,
            guidance_scale: 1.0,
            weights_seed: 0,
            checkpoint: None,
            real_views: None,
            images: None,
            mock_guidance: false,
        };
        Ok(m)
    }

    pub fn controller_config(&self) -> Result<ControllerConfig> {
        parse_controller_config(&self.config)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.controller_config()?;
        if cfg.to_string() != self.config {
            return Err(Error::config(format!("manifest config {:?} is not canonical; expected {:?}", self.config, cfg.to_string())));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(16) {
            return Err(Error::config(format!("image size must be a positive multiple of 16, got {}", self.image_size)));
        }
        if self.steps == 0 {
            return Err(Error::config("at least one sampling step is required"));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::config("guidance scale must be finite and nonnegative"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("run name must be a plain file name prefix"));
        }
        if self.mode == Mode::Eval && self.images.is_none() {
            return Err(Error::config("eval needs a directory of images to score"));
        }
        if self.mode != Mode::Gen3d && self.mock_guidance {
            return Err(Error::config("mock guidance only applies to gen3d"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    /// Flat `key = value` run file; `#` starts a comment. `mode`, `config`,
    /// `image` and `out` are required. `latent_size` may stand in for
    /// `image_size`.
    pub fn from_key_value(s: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim().to_string();
            if kv.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        let mut take = |k: &str| kv.remove(k);
        let required = |v: Option<String>, k: &str| v.ok_or_else(|| Error::config(format!("run file is missing `{k}`")));
        let mode = match required(take("mode"), "mode")?.as_str() {
            "mvgen" => Mode::Mvgen,
            "gen3d" => Mode::Gen3d,
            "eval" => Mode::Eval,
            other => return Err(Error::config(format!("unknown mode `{other}`"))),
        };
        let config = required(take("config"), "config")?;
        let image = required(take("image"), "image")?;
        let out = required(take("out"), "out")?;
        let seed = take("seed").map(|v| num(&v, "seed")).transpose()?.unwrap_or(0);
        let mut m = Self::new(mode, &config, image, out, seed)?;
        if let Some(v) = take("latent_size") {
            m.image_size = num::<usize>(&v, "latent_size")? * EncoderConfig::default().codec_downsample;
        }
        if let Some(v) = take("image_size") {
            m.image_size = num(&v, "image_size")?;
        }
        if let Some(v) = take("name") {
            m.name = v;
        }
        if let Some(v) = take("text") {
            m.text = v;
        }
        if let Some(v) = take("steps") {
            m.steps = num(&v, "steps")?;
        }
        if let Some(v) = take("iters") {
            m.iters = num(&v, "iters")?;
        }
        if let Some(v) = take("guidance_scale") {
            m.guidance_scale = num(&v, "guidance_scale")?;
        }
        if let Some(v) = take("weights_seed") {
            m.weights_seed = num(&v, "weights_seed")?;
        }
        if let Some(v) = take("mock_guidance") {
            m.mock_guidance = num(&v, "mock_guidance")?;
        }
        m.checkpoint = take("checkpoint").map(PathBuf::from);
        m.real_views = take("real_views").map(PathBuf::from);
        m.images = take("images").map(PathBuf::from);
        if let Some(k) = kv.keys().next() {
            return Err(Error::config(format!("unknown run file key `{k}`")));
        }
        m.validate()?;
        Ok(m)
    }

    /// Reads `manifest.json` style JSON, or a `key = value` run file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if text.trim_start().starts_with('{') {
            Self::from_json(&text)
        } else {
            Self::from_key_value(&text)
        }
    }

    pub fn expect_mode(&self, mode: Mode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::config(format!("manifest is for {}, not {mode}", self.mode)));
        }
        Ok(())
    }
}

fn num<T: FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("`{key}` has invalid value `{v}`")))
}
