use ndarray::{concatenate, s, Array1, Array2, Array4, Array5, ArrayView2, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};

use super::attention::{cross_attention_frames, dense_attention_frames, frames_to_tokens, tokens_to_frames};
use super::{Conditioning, Denoiser, DenoiserOutput, MultiViewLatent};
use crate::controllers::stack_frames;
use crate::error::{Error, Result};
use crate::nn::{join, sinusoidal_embedding, Activation, Attention, Conv3x3, LayerNorm, Linear, Mlp, ParamInit, Parameters};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    pub channels: usize,
    /// Width of the per-frame timestep + camera embedding.
    pub d_emb: usize,
    pub d_ctx: usize,
    pub heads: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            channels: 32,
            d_emb: 32,
            d_ctx: 16,
            heads: 2,
        }
    }
}

fn silu_frames(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| Activation::Silu.apply(v))
}

/// Token-wise layer norm over channels of every frame.
fn norm_frames(ln: &LayerNorm, x: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
    let (f, _, h, w) = x.dim();
    tokens_to_frames(ln.forward(frames_to_tokens(x).view())?, f, h, w)
}

fn linear_frames(lin: &Linear, x: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
    let (f, _, h, w) = x.dim();
    tokens_to_frames(lin.forward(frames_to_tokens(x).view())?, f, h, w)
}

fn conv_frames(conv: &Conv3x3, x: ArrayView4<'_, f64>) -> Result<Array4<f64>> {
    let frames = x
        .outer_iter()
        .map(|frame| conv.forward(frame))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| Error::dim(e.to_string()))
}

fn avg_pool2(x: &Array4<f64>) -> Array4<f64> {
    let (f, c, h, w) = x.dim();
    Array4::from_shape_fn((f, c, h / 2, w / 2), |(fi, ci, y, xx)| {
        (x[[fi, ci, 2 * y, 2 * xx]] + x[[fi, ci, 2 * y + 1, 2 * xx]] + x[[fi, ci, 2 * y, 2 * xx + 1]] + x[[fi, ci, 2 * y + 1, 2 * xx + 1]]) / 4.0
    })
}

fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (f, c, h, w) = x.dim();
    Array4::from_shape_fn((f, c, 2 * h, 2 * w), |(fi, ci, y, xx)| x[[fi, ci, y / 2, xx / 2]])
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock {
    norm1: LayerNorm,
    conv1: Conv3x3,
    emb_proj: Linear,
    norm2: LayerNorm,
    conv2: Conv3x3,
    skip: Option<Linear>,
}

impl ResBlock {
    fn init(init: &mut ParamInit, c_in: usize, c_out: usize, d_emb: usize) -> Self {
        Self {
            norm1: LayerNorm::new(c_in),
            conv1: Conv3x3::init(init, c_in, c_out),
            emb_proj: Linear::init(init, d_emb, c_out),
            norm2: LayerNorm::new(c_out),
            conv2: Conv3x3::init(init, c_out, c_out),
            skip: (c_in != c_out).then(|| Linear::init(init, c_in, c_out)),
        }
    }

    /// `emb` holds one embedding row per frame.
    fn forward(&self, x: &Array4<f64>, emb: ArrayView2<'_, f64>) -> Result<Array4<f64>> {
        let h = silu_frames(&norm_frames(&self.norm1, x.view())?);
        let mut h = conv_frames(&self.conv1, h.view())?;
        let e = self.emb_proj.forward(emb.mapv(|v| Activation::Silu.apply(v)).view())?;
        for (mut frame, e_row) in h.outer_iter_mut().zip(e.rows()) {
            for (mut chan, bias) in frame.outer_iter_mut().zip(e_row.iter()) {
                chan += *bias;
            }
        }
        let h = silu_frames(&norm_frames(&self.norm2, h.view())?);
        let h = conv_frames(&self.conv2, h.view())?;
        let skip = match &self.skip {
            Some(lin) => linear_frames(lin, x.view())?,
            None => x.clone(),
        };
        Ok(skip + h)
    }
}

impl Parameters for ResBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.emb_proj.visit(&join(prefix, "emb_proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.emb_proj.visit_mut(&join(prefix, "emb_proj"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(prefix, "skip"), f);
        }
    }
}

/// Residual block, dense 3D self-attention over all frames, then
/// cross-attention to the context tokens.
#[derive(Debug, Clone, PartialEq)]
struct Stage {
    res: ResBlock,
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
}

impl Stage {
    fn init(init: &mut ParamInit, c_in: usize, cfg: &UNetConfig) -> Self {
        let c = cfg.channels;
        Self {
            res: ResBlock::init(init, c_in, c, cfg.d_emb),
            norm_self: LayerNorm::new(c),
            self_attn: Attention::init(init, c, c, c, c, cfg.heads),
            norm_cross: LayerNorm::new(c),
            cross_attn: Attention::init(init, c, cfg.d_ctx, c, c, cfg.heads),
        }
    }

    fn forward(&self, x: &Array4<f64>, emb: ArrayView2<'_, f64>, context: ArrayView2<'_, f64>) -> Result<Array4<f64>> {
        let x = self.res.forward(x, emb)?;
        let h = norm_frames(&self.norm_self, x.view())?;
        let x = x + dense_attention_frames(&self.self_attn, h.view())?;
        let h = norm_frames(&self.norm_cross, x.view())?;
        Ok(&x + &cross_attention_frames(&self.cross_attn, h.view(), context)?)
    }
}

impl Parameters for Stage {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.res.visit(&join(prefix, "res"), f);
        self.norm_self.visit(&join(prefix, "norm_self"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm_cross.visit(&join(prefix, "norm_cross"), f);
        self.cross_attn.visit(&join(prefix, "cross_attn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.res.visit_mut(&join(prefix, "res"), f);
        self.norm_self.visit_mut(&join(prefix, "norm_self"), f);
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.norm_cross.visit_mut(&join(prefix, "norm_cross"), f);
        self.cross_attn.visit_mut(&join(prefix, "cross_attn"), f);
    }
}

/// Two down stages, one mid stage, two up stages with skip connections.
/// Prompt frames ride along with the view frames through every stage, so
/// each dense-attention layer sees the prompts' own activations at that
/// depth; their outputs are dropped at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewUNet {
    config: UNetConfig,
    time_mlp: Mlp,
    conv_in: Conv3x3,
    down: Vec<Stage>,
    mid: Stage,
    up: Vec<Stage>,
    norm_out: LayerNorm,
    conv_out: Conv3x3,
}

impl MultiViewUNet {
    pub fn init(init: &mut ParamInit, config: UNetConfig) -> Self {
        let c = config.channels;
        Self {
            time_mlp: Mlp::init(init, config.d_emb, config.d_emb, config.d_emb, Activation::Silu),
            conv_in: Conv3x3::init(init, config.latent_channels, c),
            down: (0..2).map(|_| Stage::init(init, c, &config)).collect(),
            mid: Stage::init(init, c, &config),
            up: (0..2).map(|_| Stage::init(init, 2 * c, &config)).collect(),
            norm_out: LayerNorm::new(c),
            conv_out: Conv3x3::init(init, c, config.latent_channels),
            config,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    fn frame_embeddings(&self, t: usize, cond: &Conditioning) -> Result<Array2<f64>> {
        let d = self.config.d_emb;
        let time = |step: usize| -> Result<Array1<f64>> {
            let feat = sinusoidal_embedding(step as f64, d).insert_axis(Axis(0));
            Ok(self.time_mlp.forward(feat.view())?.row(0).to_owned())
        };
        let view_t = time(t)?;
        // prompt frames are clean, so they carry timestep 0
        let prompt_t = time(0)?;
        let frames = cond.stack_frame_count();
        let mut emb = Array2::zeros((frames, d));
        for (i, cam) in cond.view_cams.iter().enumerate() {
            if cam.vector.len() != d {
                return Err(Error::dim(format!("camera embedding has dim {}, expected {d}", cam.vector.len())));
            }
            emb.row_mut(i).assign(&(&view_t + &cam.vector));
        }
        for (k, p) in cond.pixel.iter().enumerate() {
            if p.camera.vector.len() != d {
                return Err(Error::dim(format!("camera embedding has dim {}, expected {d}", p.camera.vector.len())));
            }
            emb.row_mut(4 + k).assign(&(&prompt_t + &p.camera.vector));
        }
        Ok(emb)
    }

    fn forward_frames(&self, x: &Array4<f64>, emb: ArrayView2<'_, f64>, context: ArrayView2<'_, f64>) -> Result<Array4<f64>> {
        let x = conv_frames(&self.conv_in, x.view())?;
        let skip1 = self.down[0].forward(&x, emb, context)?;
        let skip2 = self.down[1].forward(&avg_pool2(&skip1), emb, context)?;
        let x = self.mid.forward(&avg_pool2(&skip2), emb, context)?;
        let x = concatenate(Axis(1), &[upsample2(&x).view(), skip2.view()]).map_err(|e| Error::dim(e.to_string()))?;
        let x = self.up[0].forward(&x, emb, context)?;
        let x = concatenate(Axis(1), &[upsample2(&x).view(), skip1.view()]).map_err(|e| Error::dim(e.to_string()))?;
        let x = self.up[1].forward(&x, emb, context)?;
        let h = silu_frames(&norm_frames(&self.norm_out, x.view())?);
        conv_frames(&self.conv_out, h.view())
    }
}

impl Denoiser for MultiViewUNet {
    fn predict_noise(&self, noisy: &MultiViewLatent, t: usize, cond: &Conditioning) -> Result<DenoiserOutput> {
        let (b, c, h, w) = noisy.shape();
        if c != self.config.latent_channels {
            return Err(Error::dim(format!("denoiser expects {} latent channels, got {c}", self.config.latent_channels)));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::dim(format!("latent spatial dims must be multiples of 4, got {h}x{w}")));
        }
        let prompts: Vec<_> = cond.pixel.iter().map(|p| (p.label, &p.latent)).collect();
        let stacked = stack_frames(noisy, &prompts)?;
        let emb = self.frame_embeddings(t, cond)?;
        let context = cond.context_tokens();
        if context.ncols() != self.config.d_ctx {
            return Err(Error::dim(format!("context dim {} differs from d_ctx {}", context.ncols(), self.config.d_ctx)));
        }
        let mut out = Array5::zeros((b, 4, c, h, w));
        for bi in 0..b {
            let frames = stacked.data.slice(s![bi, .., .., .., ..]).to_owned();
            let y = self.forward_frames(&frames, emb.view(), context.view())?;
            out.slice_mut(s![bi, .., .., .., ..]).assign(&y.slice(s![..4, .., .., ..]));
        }
        Ok(DenoiserOutput {
            eps_hat: MultiViewLatent::new(out)?,
        })
    }
}

impl Parameters for MultiViewUNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.time_mlp.visit(&join(prefix, "time_mlp"), f);
        self.conv_in.visit(&join(prefix, "conv_in"), f);
        for (i, s) in self.down.iter().enumerate() {
            s.visit(&join(prefix, &format!("down{i}")), f);
        }
        self.mid.visit(&join(prefix, "mid"), f);
        for (i, s) in self.up.iter().enumerate() {
            s.visit(&join(prefix, &format!("up{i}")), f);
        }
        self.norm_out.visit(&join(prefix, "norm_out"), f);
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.time_mlp.visit_mut(&join(prefix, "time_mlp"), f);
        self.conv_in.visit_mut(&join(prefix, "conv_in"), f);
        for (i, s) in self.down.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("down{i}")), f);
        }
        self.mid.visit_mut(&join(prefix, "mid"), f);
        for (i, s) in self.up.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("up{i}")), f);
        }
        self.norm_out.visit_mut(&join(prefix, "norm_out"), f);
        self.conv_out.visit_mut(&join(prefix, "conv_out"), f);
    }
}
