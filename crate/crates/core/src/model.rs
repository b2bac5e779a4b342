use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::encoders::{EncoderConfig, Encoders};
use crate::error::{Error, Result};
use crate::mv_unet::{MultiViewUNet, NoiseSchedule, UNetConfig};
use crate::nn::{ParamInit, Parameters};
use crate::prompting::CameraEncoder;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub unet: UNetConfig,
    pub schedule_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            unet: UNetConfig::default(),
            schedule_steps: 100,
        }
    }
}

/// Encoders, camera adaptor, denoiser and noise schedule.
#[derive(Debug)]
pub struct MultiViewModel {
    pub config: ModelConfig,
    pub encoders: Encoders,
    pub camera: CameraEncoder,
    pub unet: MultiViewUNet,
    pub schedule: NoiseSchedule,
}

impl MultiViewModel {
    pub fn init(config: ModelConfig, weights_seed: u64) -> Result<Self> {
        let e = &config.encoder;
        let u = &config.unet;
        if e.d_ctx != u.d_ctx {
            return Err(Error::config(format!("encoder d_ctx {} differs from denoiser d_ctx {}", e.d_ctx, u.d_ctx)));
        }
        if e.latent_channels != u.latent_channels {
            return Err(Error::config("encoder and denoiser disagree on latent channels"));
        }
        if config.schedule_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let encoders = Encoders::init(e.clone(), weights_seed);
        let camera = CameraEncoder::init(&mut ParamInit::new(derive_seed(weights_seed, "camera")), u.d_emb);
        let unet = MultiViewUNet::init(&mut ParamInit::new(derive_seed(weights_seed, "unet")), u.clone());
        Ok(Self {
            schedule: NoiseSchedule::cosine(config.schedule_steps),
            config,
            encoders,
            camera,
            unet,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.extend_from("", self);
        ck
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_into("", self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        self.load_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Parameters for MultiViewModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f64>)) {
        self.encoders.visit(&crate::nn::join(prefix, "encoders"), f);
        self.camera.visit(&crate::nn::join(prefix, "camera"), f);
        self.unet.visit(&crate::nn::join(prefix, "unet"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f64>)) {
        self.encoders.visit_mut(&crate::nn::join(prefix, "encoders"), f);
        self.camera.visit_mut(&crate::nn::join(prefix, "camera"), f);
        self.unet.visit_mut(&crate::nn::join(prefix, "unet"), f);
    }
}
