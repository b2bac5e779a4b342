//! Image, pixel-latent and text encoders.
//!
//! Every encoder is a seed-initialized toy network behind a trait, so a
//! backend with pretrained weights can be dropped in by implementing the
//! trait (or by loading a checkpoint into the toy networks).

use std::fmt::Debug;

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{join, Activation, Attention, LayerNorm, Linear, Mlp, ParamInit, Parameters};
use crate::prompting::ImagePrompt;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Side length the hidden-token encoder expects.
    pub image_size: usize,
    pub patch_size: usize,
    pub d_enc: usize,
    pub enc_heads: usize,
    pub d_ctx: usize,
    /// Output tokens of the resampler.
    pub local_tokens: usize,
    pub adaptor_hidden: usize,
    pub text_len: usize,
    pub codec_downsample: usize,
    pub latent_channels: usize,
    pub latent_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 14,
            d_enc: 32,
            enc_heads: 2,
            d_ctx: 16,
            local_tokens: 16,
            adaptor_hidden: 32,
            text_len: 8,
            codec_downsample: 4,
            latent_channels: 4,
            latent_scale: 0.25,
        }
    }
}

impl EncoderConfig {
    /// 1 class token plus one token per patch.
    pub fn hidden_token_count(&self) -> usize {
        1 + (self.image_size / self.patch_size).pow(2)
    }
}

/// Encoder hidden states before global pooling: class token then patches.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTokens {
    pub tokens: Array2<f64>,
}

/// Resampled (and possibly adapted) tokens for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTokens {
    pub tokens: Array2<f64>,
}

/// `c × h_l × w_l` latent of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLatent {
    pub data: Array3<f64>,
}

impl PixelLatent {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

/// `T × d_ctx` text conditioning tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TextContext {
    pub tokens: Array2<f64>,
}

pub trait HiddenImageEncoder: Parameters + Debug + Send + Sync {
    fn input_size(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn encode_hidden(&self, rgb: &ImageTensor) -> Result<HiddenTokens>;
}

pub trait PixelCodec: Parameters + Debug + Send + Sync {
    fn downsample(&self) -> usize;
    fn channels(&self) -> usize;
    fn encode(&self, rgb: &ImageTensor) -> Result<PixelLatent>;
    fn decode(&self, latent: &PixelLatent) -> Result<ImageTensor>;
    /// Pull a latent-space cotangent back to an `H × W × 3` image cotangent.
    fn encode_vjp(&self, grad: &Array3<f64>) -> Result<Array3<f64>>;
}

pub trait TextEncoder: Parameters + Debug + Send + Sync {
    fn context_len(&self) -> usize;
    fn encode_text(&self, prompt: &str) -> Result<TextContext>;
}

/// ViT-style toy encoder: patch embedding, one pre-norm transformer block,
/// final norm. Returns every token, not a pooled vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyImageEncoder {
    image_size: usize,
    patch_size: usize,
    pub patch_embed: Linear,
    pub class_token: Array1<f64>,
    pub pos_embed: Array2<f64>,
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub ln_post: LayerNorm,
}

impl ToyImageEncoder {
    pub fn init(init: &mut ParamInit, cfg: &EncoderConfig) -> Self {
        assert!(cfg.image_size.is_multiple_of(cfg.patch_size), "image size must be a multiple of the patch size");
        let d = cfg.d_enc;
        let patch_dim = cfg.patch_size * cfg.patch_size * 3;
        Self {
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
            patch_embed: Linear::init(init, patch_dim, d),
            class_token: init.vector(d, 0.5),
            pos_embed: init.matrix(cfg.hidden_token_count(), d, 0.1),
            ln1: LayerNorm::new(d),
            attn: Attention::init(init, d, d, d, d, cfg.enc_heads),
            ln2: LayerNorm::new(d),
            mlp: Mlp::init(init, d, 2 * d, d, Activation::Gelu),
            ln_post: LayerNorm::new(d),
        }
    }

    fn check_input(&self, rgb: &ImageTensor) -> Result<()> {
        if !rgb.is_square() || rgb.height() != self.image_size {
            return Err(Error::dim(format!(
                "image encoder expects {0}x{0} input, got {1}x{2}",
                self.image_size,
                rgb.height(),
                rgb.width()
            )));
        }
        Ok(())
    }

    /// Tokens entering the transformer block: `[class + pos_0; patch_i W + b + pos_i]`.
    pub fn embed_patches(&self, rgb: &ImageTensor) -> Result<Array2<f64>> {
        self.check_input(rgb)?;
        let p = self.patch_size;
        let grid = self.image_size / p;
        let img = rgb.view();
        let mut patches = Array2::zeros((grid * grid, p * p * 3));
        for gy in 0..grid {
            for gx in 0..grid {
                let mut row = patches.row_mut(gy * grid + gx);
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            row[(dy * p + dx) * 3 + c] = 2.0 * img[[gy * p + dy, gx * p + dx, c]] - 1.0;
                        }
                    }
                }
            }
        }
        let embedded = self.patch_embed.forward(patches.view())?;
        let cls = self.class_token.view().insert_axis(Axis(0));
        let tokens = concatenate(Axis(0), &[cls, embedded.view()]).map_err(|e| Error::dim(e.to_string()))?;
        Ok(tokens + &self.pos_embed)
    }

    pub fn block(&self, tokens: Array2<f64>) -> Result<Array2<f64>> {
        let h = self.ln1.forward(tokens.view())?;
        let x = tokens + self.attn.forward(h.view(), h.view())?;
        let h = self.ln2.forward(x.view())?;
        let x = &x + &self.mlp.forward(h.view())?;
        self.ln_post.forward(x.view())
    }
}

impl HiddenImageEncoder for ToyImageEncoder {
    fn input_size(&self) -> usize {
        self.image_size
    }

    fn hidden_dim(&self) -> usize {
        self.class_token.len()
    }

    fn encode_hidden(&self, rgb: &ImageTensor) -> Result<HiddenTokens> {
        let tokens = self.block(self.embed_patches(rgb)?)?;
        Ok(HiddenTokens { tokens })
    }
}

impl Parameters for ToyImageEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "class_token"), self.class_token.view().into_dyn());
        f(&join(prefix, "pos_embed"), self.pos_embed.view().into_dyn());
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
        self.ln_post.visit(&join(prefix, "ln_post"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "class_token"), self.class_token.view_mut().into_dyn());
        f(&join(prefix, "pos_embed"), self.pos_embed.view_mut().into_dyn());
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        self.ln_post.visit_mut(&join(prefix, "ln_post"), f);
    }
}

/// Learned latent queries cross-attending to encoder hidden tokens. The
/// inputs carry no positional encoding here.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampler {
    pub queries: Array2<f64>,
    pub attn: Attention,
    /// Required input token count; `None` accepts any count.
    pub expected_inputs: Option<usize>,
}

impl Resampler {
    pub fn init(init: &mut ParamInit, cfg: &EncoderConfig) -> Self {
        Self {
            queries: init.matrix(cfg.local_tokens, cfg.d_ctx, 1.0),
            attn: Attention::init(init, cfg.d_ctx, cfg.d_enc, cfg.d_ctx, cfg.d_ctx, 1),
            expected_inputs: Some(cfg.hidden_token_count()),
        }
    }

    pub fn output_tokens(&self) -> usize {
        self.queries.nrows()
    }

    pub fn resample(&self, hidden: &HiddenTokens) -> Result<LocalTokens> {
        if let Some(n) = self.expected_inputs {
            if hidden.tokens.nrows() != n {
                return Err(Error::dim(format!(
                    "resampler expects {n} hidden tokens, got {}",
                    hidden.tokens.nrows()
                )));
            }
        }
        let tokens = self.attn.forward(self.queries.view(), hidden.tokens.view())?;
        Ok(LocalTokens { tokens })
    }
}

impl Parameters for Resampler {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "queries"), self.queries.view().into_dyn());
        self.attn.visit(&join(prefix, "attn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "queries"), self.queries.view_mut().into_dyn());
        self.attn.visit_mut(&join(prefix, "attn"), f);
    }
}

/// MLP adaptor applied token-wise to resampled features.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAdaptor {
    pub mlp: Mlp,
    token_count: usize,
}

impl LocalAdaptor {
    pub fn init(init: &mut ParamInit, cfg: &EncoderConfig) -> Self {
        Self {
            mlp: Mlp::init(init, cfg.d_ctx, cfg.adaptor_hidden, cfg.d_ctx, Activation::Gelu),
            token_count: cfg.local_tokens,
        }
    }

    pub fn from_mlp(mlp: Mlp, token_count: usize) -> Self {
        Self { mlp, token_count }
    }

    pub fn adapt(&self, local: &LocalTokens) -> Result<LocalTokens> {
        if local.tokens.nrows() != self.token_count {
            return Err(Error::dim(format!(
                "adaptor expects {} tokens, got {}",
                self.token_count,
                local.tokens.nrows()
            )));
        }
        Ok(LocalTokens {
            tokens: self.mlp.forward(local.tokens.view())?,
        })
    }
}

impl Parameters for LocalAdaptor {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.mlp.visit(&join(prefix, "mlp"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
    }
}

/// Linear patch autoencoder. Each `f × f × 3` patch (mapped to `[-1, 1]`) is
/// projected onto `c` orthonormal directions: the first three are the
/// per-channel patch means, the rest are seeded random directions. The
/// decoder is the transpose, so `decode ∘ encode` is an orthogonal
/// projection and constant-color patches round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPixelCodec {
    downsample: usize,
    /// `c × (f·f·3)`, orthonormal rows.
    pub basis: Array2<f64>,
    scale: f64,
}

impl ToyPixelCodec {
    pub fn init(init: &mut ParamInit, cfg: &EncoderConfig) -> Self {
        let f = cfg.codec_downsample;
        let patch_dim = f * f * 3;
        let c = cfg.latent_channels;
        assert!((3..=patch_dim).contains(&c), "latent channels must be between 3 and the patch size");
        let mut rows: Vec<Array1<f64>> = (0..3)
            .map(|ch| {
                Array1::from_shape_fn(patch_dim, |i| if i % 3 == ch { 1.0 / f as f64 } else { 0.0 })
            })
            .collect();
        while rows.len() < c {
            let mut v = init.vector(patch_dim, 1.0);
            for r in &rows {
                let proj = v.dot(r);
                v.scaled_add(-proj, r);
            }
            let norm = v.dot(&v).sqrt();
            rows.push(v / norm);
        }
        let mut basis = Array2::zeros((c, patch_dim));
        for (i, r) in rows.iter().enumerate() {
            basis.row_mut(i).assign(r);
        }
        Self {
            downsample: f,
            basis,
            scale: cfg.latent_scale,
        }
    }

    fn patch_index(&self, dy: usize, dx: usize, ch: usize) -> usize {
        (dy * self.downsample + dx) * 3 + ch
    }
}

impl PixelCodec for ToyPixelCodec {
    fn downsample(&self) -> usize {
        self.downsample
    }

    fn channels(&self) -> usize {
        self.basis.nrows()
    }

    fn encode(&self, rgb: &ImageTensor) -> Result<PixelLatent> {
        let f = self.downsample;
        if !rgb.is_square() || !rgb.height().is_multiple_of(f) {
            return Err(Error::dim(format!(
                "pixel encoder needs a square image with side divisible by {f}, got {}x{}",
                rgb.height(),
                rgb.width()
            )));
        }
        let (hl, wl) = (rgb.height() / f, rgb.width() / f);
        let img = rgb.view();
        let c = self.channels();
        let mut out = Array3::zeros((c, hl, wl));
        let mut patch = Array1::zeros(f * f * 3);
        for i in 0..hl {
            for j in 0..wl {
                for dy in 0..f {
                    for dx in 0..f {
                        for ch in 0..3 {
                            patch[self.patch_index(dy, dx, ch)] = 2.0 * img[[i * f + dy, j * f + dx, ch]] - 1.0;
                        }
                    }
                }
                let z = self.basis.dot(&patch) * self.scale;
                out.slice_mut(s![.., i, j]).assign(&z);
            }
        }
        Ok(PixelLatent { data: out })
    }

    fn decode(&self, latent: &PixelLatent) -> Result<ImageTensor> {
        let (c, hl, wl) = latent.shape();
        if c != self.channels() {
            return Err(Error::dim(format!("decoder expects {} channels, got {c}", self.channels())));
        }
        if latent.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite latent"));
        }
        let f = self.downsample;
        let mut out = Array3::zeros((hl * f, wl * f, 3));
        for i in 0..hl {
            for j in 0..wl {
                let z = latent.data.slice(s![.., i, j]).to_owned() / self.scale;
                let patch = self.basis.t().dot(&z);
                for dy in 0..f {
                    for dx in 0..f {
                        for ch in 0..3 {
                            out[[i * f + dy, j * f + dx, ch]] = (patch[self.patch_index(dy, dx, ch)] + 1.0) / 2.0;
                        }
                    }
                }
            }
        }
        ImageTensor::new(out)
    }

    fn encode_vjp(&self, grad: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, hl, wl) = grad.dim();
        if c != self.channels() {
            return Err(Error::dim(format!("latent cotangent has {c} channels, expected {}", self.channels())));
        }
        let f = self.downsample;
        let mut out = Array3::zeros((hl * f, wl * f, 3));
        for i in 0..hl {
            for j in 0..wl {
                let g = grad.slice(s![.., i, j]);
                let patch = self.basis.t().dot(&g) * (2.0 * self.scale);
                for dy in 0..f {
                    for dx in 0..f {
                        for ch in 0..3 {
                            out[[i * f + dy, j * f + dx, ch]] = patch[self.patch_index(dy, dx, ch)];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

// The basis is a fixed transform, not a learned
// weight; keeping it in f64 keeps it exactly orthonormal.
impl Parameters for ToyPixelCodec {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {}

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {}
}

/// Hash-seeded word embeddings plus learned positions; unused slots hold a
/// learned pad embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEncoder {
    vocab_seed: u64,
    pub pos_embed: Array2<f64>,
    pub pad: Array1<f64>,
}

impl ToyTextEncoder {
    pub fn init(init: &mut ParamInit, cfg: &EncoderConfig, vocab_seed: u64) -> Self {
        Self {
            vocab_seed,
            pos_embed: init.matrix(cfg.text_len, cfg.d_ctx, 0.1),
            pad: init.vector(cfg.d_ctx, 0.1),
        }
    }

    fn word_embedding(&self, word: &str) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.vocab_seed, &format!("word:{word}")));
        Array1::from_shape_fn(self.pad.len(), |_| StandardNormal.sample(&mut rng))
    }

    fn words(prompt: &str) -> Vec<String> {
        prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }
}

impl TextEncoder for ToyTextEncoder {
    fn context_len(&self) -> usize {
        self.pos_embed.nrows()
    }

    fn encode_text(&self, prompt: &str) -> Result<TextContext> {
        let words = Self::words(prompt);
        if words.is_empty() {
            return Err(Error::config("text prompt must contain at least one word"));
        }
        let mut tokens = self.pos_embed.clone();
        for (i, mut row) in tokens.rows_mut().into_iter().enumerate() {
            match words.get(i) {
                Some(w) => row += &self.word_embedding(w),
                None => row += &self.pad,
            }
        }
        Ok(TextContext { tokens })
    }
}

impl Parameters for ToyTextEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        f(&join(prefix, "pos_embed"), self.pos_embed.view().into_dyn());
        f(&join(prefix, "pad"), self.pad.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        f(&join(prefix, "pos_embed"), self.pos_embed.view_mut().into_dyn());
        f(&join(prefix, "pad"), self.pad.view_mut().into_dyn());
    }
}

/// Seed of the transforms that do not vary with the model weights.
pub const FIXED_TRANSFORM_SEED: u64 = 0;

/// All encoders used by the controllers.
#[derive(Debug)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub image: Box<dyn HiddenImageEncoder>,
    pub resampler: Resampler,
    pub adaptor: LocalAdaptor,
    pub codec: Box<dyn PixelCodec>,
    pub text: Box<dyn TextEncoder>,
}

impl Encoders {
    pub fn init(cfg: EncoderConfig, seed: u64) -> Self {
        let mut init = ParamInit::new(derive_seed(seed, "encoders"));
        let image = ToyImageEncoder::init(&mut init, &cfg);
        let resampler = Resampler::init(&mut init, &cfg);
        let adaptor = LocalAdaptor::init(&mut init, &cfg);
        // The codec basis and the word hash table are fixed transforms shared by
        // every weight seed; neither is stored in checkpoints.
        let codec = ToyPixelCodec::init(&mut ParamInit::new(derive_seed(FIXED_TRANSFORM_SEED, "codec")), &cfg);
        let text = ToyTextEncoder::init(&mut init, &cfg, derive_seed(FIXED_TRANSFORM_SEED, "vocab"));
        Self {
            config: cfg,
            image: Box::new(image),
            resampler,
            adaptor,
            codec: Box::new(codec),
            text: Box::new(text),
        }
    }

    pub fn encode_image_hidden(&self, rgb: &ImageTensor) -> Result<HiddenTokens> {
        self.image.encode_hidden(rgb)
    }

    pub fn resample_tokens(&self, hidden: &HiddenTokens) -> Result<LocalTokens> {
        self.resampler.resample(hidden)
    }

    pub fn adapt_local_tokens(&self, local: &LocalTokens) -> Result<LocalTokens> {
        self.adaptor.adapt(local)
    }

    pub fn encode_pixel_latent(&self, rgb: &ImageTensor) -> Result<PixelLatent> {
        self.codec.encode(rgb)
    }

    pub fn decode_pixel_latent(&self, latent: &PixelLatent) -> Result<ImageTensor> {
        self.codec.decode(latent)
    }

    pub fn encode_text(&self, prompt: &str) -> Result<TextContext> {
        self.text.encode_text(prompt)
    }

    /// Hidden tokens of a prompt, resized to the encoder's input size. Uses
    /// the prompt's cache when present.
    pub fn hidden_tokens_for(&self, prompt: &ImagePrompt) -> Result<HiddenTokens> {
        if let Some(h) = prompt.hidden_tokens() {
            return Ok(h.clone());
        }
        let side = self.image.input_size();
        self.image.encode_hidden(&prompt.rgb().resized(side, side))
    }

    pub fn pixel_latent_for(&self, prompt: &ImagePrompt) -> Result<PixelLatent> {
        match prompt.pixel_latent() {
            Some(l) => Ok(l.clone()),
            None => self.codec.encode(prompt.rgb()),
        }
    }

    /// Adapted local tokens of one prompt image.
    pub fn local_tokens_for(&self, prompt: &ImagePrompt) -> Result<LocalTokens> {
        let hidden = self.hidden_tokens_for(prompt)?;
        self.adapt_local_tokens(&self.resample_tokens(&hidden)?)
    }

    /// Fill both caches of a prompt.
    pub fn cache_features(&self, prompt: ImagePrompt) -> Result<ImagePrompt> {
        let hash = prompt.content_hash();
        let latent = self.pixel_latent_for(&prompt)?;
        let hidden = self.hidden_tokens_for(&prompt)?;
        prompt.with_pixel_latent(latent, hash)?.with_hidden_tokens(hidden, hash)
    }
}

impl Parameters for Encoders {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        self.image.visit(&join(prefix, "image"), f);
        self.resampler.visit(&join(prefix, "resampler"), f);
        self.adaptor.visit(&join(prefix, "adaptor"), f);
        self.codec.visit(&join(prefix, "codec"), f);
        self.text.visit(&join(prefix, "text"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        self.image.visit_mut(&join(prefix, "image"), f);
        self.resampler.visit_mut(&join(prefix, "resampler"), f);
        self.adaptor.visit_mut(&join(prefix, "adaptor"), f);
        self.codec.visit_mut(&join(prefix, "codec"), f);
        self.text.visit_mut(&join(prefix, "text"), f);
    }
}
