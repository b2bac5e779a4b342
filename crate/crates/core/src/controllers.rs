//! Multi-image local and pixel controllers.
//!
//! The local controller resamples and adapts each selected prompt's hidden
//! tokens independently and concatenates the 16-token blocks, giving
//! `16 · |local_views|` context tokens. The pixel controller stacks each
//! selected prompt's clean latent after the four view latents, giving a
//! `(b, 4 + |pixel_views|, c, h_l, w_l)` stack for dense attention.

use ndarray::{concatenate, s, Array2, Array5, Axis};

use crate::encoders::{Encoders, PixelLatent};
use crate::error::{Error, Result};
use crate::mv_unet::MultiViewLatent;
use crate::prompting::{ControllerConfig, ImagePrompt, PromptSet, ViewLabel, RIG_ORDER};

/// Concatenated local tokens, one 16-token block per source prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalContext {
    pub tokens: Array2<f64>,
    pub provenance: Vec<ViewLabel>,
}

impl LocalContext {
    pub fn token_count(&self) -> usize {
        self.tokens.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameRole {
    /// One of the four generated views, in rig order.
    View(ViewLabel),
    /// A clean prompt latent.
    Prompt(ViewLabel),
}

impl FrameRole {
    pub fn label(self) -> ViewLabel {
        match self {
            FrameRole::View(l) | FrameRole::Prompt(l) => l,
        }
    }

    pub fn is_prompt(self) -> bool {
        matches!(self, FrameRole::Prompt(_))
    }
}

/// `(b, frames, c, h, w)` stack: four view slots then the prompt slots.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedFrames {
    pub data: Array5<f64>,
    pub roles: Vec<FrameRole>,
}

impl StackedFrames {
    pub fn new(data: Array5<f64>, roles: Vec<FrameRole>) -> Result<Self> {
        if data.shape()[1] != roles.len() {
            return Err(Error::dim(format!(
                "stack has {} frames but {} roles",
                data.shape()[1],
                roles.len()
            )));
        }
        let views_first = roles.len() >= 4
            && roles[..4]
                .iter()
                .zip(RIG_ORDER)
                .all(|(r, l)| *r == FrameRole::View(l))
            && roles[4..].iter().all(|r| r.is_prompt());
        if !views_first {
            return Err(Error::dim("stack must hold the four rig views followed by prompt slots"));
        }
        Ok(Self { data, roles })
    }

    pub fn frame_count(&self) -> usize {
        self.roles.len()
    }

    pub fn prompt_count(&self) -> usize {
        self.frame_count() - 4
    }

    /// `(b, frames, c, h, w)`
    pub fn dim(&self) -> (usize, usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn with_data(&self, data: Array5<f64>) -> Result<Self> {
        Self::new(data, self.roles.clone())
    }
}

/// Local tokens of each prompt, concatenated in the given order. No front
/// requirement is imposed here.
pub fn concat_local_tokens(encoders: &Encoders, prompts: &[&ImagePrompt]) -> Result<LocalContext> {
    if prompts.is_empty() {
        return Err(Error::config("local context needs at least one prompt"));
    }
    let blocks = prompts
        .iter()
        .map(|p| encoders.local_tokens_for(p).map(|t| t.tokens))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let tokens = concatenate(Axis(0), &views).map_err(|e| Error::dim(e.to_string()))?;
    Ok(LocalContext {
        tokens,
        provenance: prompts.iter().map(|p| p.label()).collect(),
    })
}

pub fn build_local_context(encoders: &Encoders, prompts: &PromptSet, config: &ControllerConfig) -> Result<LocalContext> {
    prompts.validate(config)?;
    concat_local_tokens(encoders, &prompts.select(config.local_views()))
}

/// Append clean prompt latents after the four view latents. View slots are
/// copied bit-for-bit; each prompt latent is broadcast across the batch.
pub fn stack_frames(views: &MultiViewLatent, prompt_latents: &[(ViewLabel, &PixelLatent)]) -> Result<StackedFrames> {
    let (b, f, c, h, w) = views.data.dim();
    debug_assert_eq!(f, 4);
    for (label, latent) in prompt_latents {
        if latent.shape() != (c, h, w) {
            return Err(Error::dim(format!(
                "{label} prompt latent has shape {:?}, views have ({c}, {h}, {w})",
                latent.shape()
            )));
        }
    }
    let frames = 4 + prompt_latents.len();
    let mut data = Array5::zeros((b, frames, c, h, w));
    data.slice_mut(s![.., ..4, .., .., ..]).assign(&views.data);
    for (k, (_, latent)) in prompt_latents.iter().enumerate() {
        for bi in 0..b {
            data.slice_mut(s![bi, 4 + k, .., .., ..]).assign(&latent.data);
        }
    }
    let roles = RIG_ORDER
        .iter()
        .map(|l| FrameRole::View(*l))
        .chain(prompt_latents.iter().map(|(l, _)| FrameRole::Prompt(*l)))
        .collect();
    StackedFrames::new(data, roles)
}

pub fn stack_pixel_latents(
    encoders: &Encoders,
    views: &MultiViewLatent,
    prompts: &PromptSet,
    config: &ControllerConfig,
) -> Result<StackedFrames> {
    prompts.validate(config)?;
    let latents = prompts
        .select(config.pixel_views())
        .into_iter()
        .map(|p| encoders.pixel_latent_for(p).map(|l| (p.label(), l)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = latents.iter().map(|(l, z)| (*l, z)).collect();
    stack_frames(views, &refs)
}

/// The four view slots of a stack; prompt slots are dropped.
pub fn unstack_views(stacked: &StackedFrames) -> MultiViewLatent {
    MultiViewLatent {
        data: stacked.data.slice(s![.., ..4, .., .., ..]).to_owned(),
    }
}
