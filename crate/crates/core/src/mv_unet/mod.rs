//! Multi-view denoiser: U-Net blocks with dense 3D self-attention over the
//! stacked frames and cross-attention over text plus local tokens, and the
//! deterministic DDIM sampler.

mod attention;
mod sampler;
mod schedule;
mod unet;

pub use attention::{cross_attention, cross_attention_frames, dense_3d_attention, dense_attention_frames, frames_to_tokens, tokens_to_frames};
pub use sampler::{ddim_sample, ddim_sample_from, ddim_step, initial_noise, ClassifierFree};
pub use schedule::NoiseSchedule;
pub use unet::{MultiViewUNet, UNetConfig};

use ndarray::{concatenate, Array2, Array5, Axis};

use crate::controllers::{build_local_context, LocalContext};
use crate::encoders::{PixelLatent, TextContext};
use crate::error::{Error, Result};
use crate::model::MultiViewModel;
use crate::prompting::{rig_pose, CameraEmbedding, ControllerConfig, ImagePrompt, PromptSet, ViewLabel};

/// `(b, 4, c, h_l, w_l)` latents of the four rig views.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewLatent {
    pub data: Array5<f64>,
}

impl MultiViewLatent {
    pub fn new(data: Array5<f64>) -> Result<Self> {
        if data.shape()[1] != 4 {
            return Err(Error::dim(format!("multi-view latent needs 4 frames, got {}", data.shape()[1])));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite multi-view latent"));
        }
        Ok(Self { data })
    }

    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            data: Array5::zeros((b, 4, c, h, w)),
        }
    }

    /// `(b, c, h, w)`
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let (b, _, c, h, w) = self.data.dim();
        (b, c, h, w)
    }

    /// Latent of one rig slot of one batch item.
    pub fn frame(&self, batch: usize, slot: usize) -> PixelLatent {
        PixelLatent {
            data: self.data.slice(ndarray::s![batch, slot, .., .., ..]).to_owned(),
        }
    }

    pub fn max_abs_diff(&self, other: &MultiViewLatent) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Noise prediction for the four views.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: MultiViewLatent,
}

/// One prompt frame for the pixel controller.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPrompt {
    pub label: ViewLabel,
    pub latent: PixelLatent,
    pub camera: CameraEmbedding,
}

/// Everything the denoiser is conditioned on besides the noisy latent and
/// timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    /// Camera embeddings of the four rig views, in rig order.
    pub view_cams: Vec<CameraEmbedding>,
    pub text: TextContext,
    /// `None` means text-only cross-attention.
    pub local: Option<LocalContext>,
    /// Prompt frames stacked after the views, in stacking order.
    pub pixel: Vec<PixelPrompt>,
}

impl Conditioning {
    /// Multi-image conditioning: local context from `config.local_views`,
    /// pixel frames from `config.pixel_views`, both in prompt-set order.
    pub fn multi_image(
        model: &MultiViewModel,
        cams: &[CameraEmbedding],
        text: &TextContext,
        prompts: &PromptSet,
        config: &ControllerConfig,
    ) -> Result<Self> {
        prompts.validate(config)?;
        let local = build_local_context(&model.encoders, prompts, config)?;
        let pixel = prompts
            .select(config.pixel_views())
            .into_iter()
            .map(|p| pixel_prompt(model, p))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(cams, text, Some(local), pixel)
    }

    /// Single-image conditioning built directly from one front prompt.
    pub fn single_image(model: &MultiViewModel, cams: &[CameraEmbedding], text: &TextContext, front: &ImagePrompt) -> Result<Self> {
        let tokens = model.encoders.local_tokens_for(front)?;
        let local = LocalContext {
            tokens: tokens.tokens,
            provenance: vec![front.label()],
        };
        Self::assemble(cams, text, Some(local), vec![pixel_prompt(model, front)?])
    }

    fn assemble(cams: &[CameraEmbedding], text: &TextContext, local: Option<LocalContext>, pixel: Vec<PixelPrompt>) -> Result<Self> {
        if cams.len() != 4 {
            return Err(Error::dim(format!("need 4 view camera embeddings, got {}", cams.len())));
        }
        if let Some(l) = &local {
            if l.tokens.ncols() != text.tokens.ncols() {
                return Err(Error::dim("text and local tokens must share d_ctx"));
            }
        }
        Ok(Self {
            view_cams: cams.to_vec(),
            text: text.clone(),
            local,
            pixel,
        })
    }

    /// Null conditioning for classifier-free guidance: zero text tokens, no
    /// local tokens, no prompt frames. Camera conditioning is kept.
    pub fn unconditional(&self) -> Self {
        Self {
            view_cams: self.view_cams.clone(),
            text: TextContext {
                tokens: Array2::zeros(self.text.tokens.dim()),
            },
            local: None,
            pixel: Vec::new(),
        }
    }

    /// Cross-attention keys/values: `[text ∥ local]`.
    pub fn context_tokens(&self) -> Array2<f64> {
        match &self.local {
            Some(l) => concatenate(Axis(0), &[self.text.tokens.view(), l.tokens.view()]).expect("d_ctx checked"),
            None => self.text.tokens.clone(),
        }
    }

    pub fn stack_frame_count(&self) -> usize {
        4 + self.pixel.len()
    }
}

fn pixel_prompt(model: &MultiViewModel, prompt: &ImagePrompt) -> Result<PixelPrompt> {
    Ok(PixelPrompt {
        label: prompt.label(),
        latent: model.encoders.pixel_latent_for(prompt)?,
        camera: model.camera.embed(&rig_pose(prompt.label())),
    })
}

/// Anything that predicts the noise in a multi-view latent.
pub trait Denoiser: Sync {
    fn predict_noise(&self, noisy: &MultiViewLatent, t: usize, cond: &Conditioning) -> Result<DenoiserOutput>;
}

/// Noise prediction for `noisy` at timestep `t` under multi-image
/// conditioning from `prompts` and `config`.
pub fn unet_forward(
    model: &MultiViewModel,
    noisy: &MultiViewLatent,
    t: usize,
    cams: &[CameraEmbedding],
    text: &TextContext,
    prompts: &PromptSet,
    config: &ControllerConfig,
) -> Result<DenoiserOutput> {
    if t >= model.schedule.len() {
        return Err(Error::config(format!("timestep {t} outside schedule of length {}", model.schedule.len())));
    }
    let cond = Conditioning::multi_image(model, cams, text, prompts, config)?;
    model.unet.predict_noise(noisy, t, &cond)
}

/// Noise prediction conditioned on a single front image.
pub fn unet_forward_single_image(
    model: &MultiViewModel,
    noisy: &MultiViewLatent,
    t: usize,
    cams: &[CameraEmbedding],
    text: &TextContext,
    front: &ImagePrompt,
) -> Result<DenoiserOutput> {
    let cond = Conditioning::single_image(model, cams, text, front)?;
    model.unet.predict_noise(noisy, t, &cond)
}
