use ndarray::{s, Array3, Array5, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::field::{l2, RadianceField};
use super::render::{render, render_vjp};
use crate::encoders::{PixelCodec, TextContext};
use crate::error::{Error, Result};
use crate::model::MultiViewModel;
use crate::mv_unet::{ClassifierFree, Conditioning, Denoiser, DenoiserOutput, MultiViewLatent, NoiseSchedule};
use crate::prompting::{orthogonal_camera_rig, ControllerConfig, PromptSet};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    /// `w(t) = 1 − ᾱ_t`
    OneMinusAlphaBar,
    Constant(f64),
}

impl Weighting {
    pub fn weight(self, alpha_bar: f64) -> f64 {
        match self {
            Weighting::OneMinusAlphaBar => 1.0 - alpha_bar,
            Weighting::Constant(w) => w,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdsConfig {
    pub weighting: Weighting,
    /// Inclusive range of sampled timesteps.
    pub t_range: (usize, usize),
    pub guidance_scale: f64,
    pub iterations: usize,
    /// Adam step size, decayed linearly from `lr` to `lr_final`.
    pub lr: f64,
    pub lr_final: f64,
    /// Side of the rendered rig views.
    pub render_size: usize,
}

impl Default for SdsConfig {
    fn default() -> Self {
        Self {
            weighting: Weighting::OneMinusAlphaBar,
            t_range: (20, 80),
            guidance_scale: 1.0,
            iterations: 100,
            lr: 0.05,
            lr_final: 0.01,
            render_size: 32,
        }
    }
}

impl SdsConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let (lo, hi) = self.t_range;
        if lo > hi || hi >= schedule.len() {
            return Err(Error::config(format!("t_range ({lo}, {hi}) outside schedule of length {}", schedule.len())));
        }
        if let Weighting::Constant(w) = self.weighting {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config("SDS weight must be finite and nonnegative"));
            }
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.lr_final.is_finite() && self.lr_final >= 0.0) {
            return Err(Error::config("learning rates must be finite and nonnegative"));
        }
        if self.render_size == 0 {
            return Err(Error::config("render size must be positive"));
        }
        Ok(())
    }

    fn lr_at(&self, iteration: usize) -> f64 {
        if self.iterations <= 1 {
            return self.lr;
        }
        let a = iteration as f64 / (self.iterations - 1) as f64;
        self.lr + (self.lr_final - self.lr) * a
    }
}

/// The denoiser, its conditioning and the codec that maps renders into its
/// latent space.
pub struct SdsGuide<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub codec: &'a dyn PixelCodec,
    pub schedule: &'a NoiseSchedule,
    pub cond: Conditioning,
}

impl<'a> SdsGuide<'a> {
    /// Guidance from the multi-view model under multi-image conditioning.
    pub fn multi_image(model: &'a MultiViewModel, text: &TextContext, prompts: &PromptSet, config: &ControllerConfig) -> Result<Self> {
        let cams = model.camera.embed_rig();
        Ok(Self {
            denoiser: &model.unet,
            codec: model.encoders.codec.as_ref(),
            schedule: &model.schedule,
            cond: Conditioning::multi_image(model, &cams, text, prompts, config)?,
        })
    }
}

/// Mock guidance that predicts the noise which would make `target` the
/// clean latent: `ε̂ = (x_t − √ᾱ_t · target) / √(1 − ᾱ_t)`. The SDS residual
/// becomes proportional to `x − target`, a convex pull.
#[derive(Debug, Clone)]
pub struct TargetPull {
    pub target: MultiViewLatent,
    pub schedule: NoiseSchedule,
}

impl Denoiser for TargetPull {
    fn predict_noise(&self, noisy: &MultiViewLatent, t: usize, _: &Conditioning) -> Result<DenoiserOutput> {
        if noisy.data.dim() != self.target.data.dim() {
            return Err(Error::dim("target latent shape differs from the noisy latent"));
        }
        let ab = self.schedule.alpha_bar(t);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = Zip::from(&noisy.data).and(&self.target.data).map_collect(|x, y| (x - sa * y) / sb);
        Ok(DenoiserOutput {
            eps_hat: MultiViewLatent { data },
        })
    }
}

/// Gradient for one SDS draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SdsStep {
    pub grad: Vec<f64>,
    pub t: usize,
    /// `‖w(t)(ε̂ − ε)‖₂`
    pub residual_norm: f64,
}

/// Encode the four rig renders into a `(1, 4, c, h, w)` latent.
pub fn render_rig_latent(field: &RadianceField, codec: &dyn PixelCodec, size: usize) -> Result<MultiViewLatent> {
    let latents = orthogonal_camera_rig()
        .iter()
        .map(|pose| codec.encode(&render(field, pose, size)?.image))
        .collect::<Result<Vec<_>>>()?;
    let (c, h, w) = latents[0].shape();
    let mut data = Array5::zeros((1, 4, c, h, w));
    for (i, z) in latents.iter().enumerate() {
        data.slice_mut(s![0, i, .., .., ..]).assign(&z.data);
    }
    Ok(MultiViewLatent { data })
}

/// SDS gradient at a fixed timestep and noise draw:
/// `g = Σ_views (∂x/∂θ)ᵀ w(t)(ε̂ − ε)`, with no gradient through `ε̂`.
pub fn sds_gradient_at(field: &RadianceField, guide: &SdsGuide<'_>, cfg: &SdsConfig, t: usize, eps: &MultiViewLatent) -> Result<SdsStep> {
    let x = render_rig_latent(field, guide.codec, cfg.render_size)?;
    if eps.data.dim() != x.data.dim() {
        return Err(Error::dim(format!("noise shape {:?} differs from latent shape {:?}", eps.data.dim(), x.data.dim())));
    }
    let ab = guide.schedule.alpha_bar(t);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t = MultiViewLatent {
        data: Zip::from(&x.data).and(&eps.data).map_collect(|x, e| sa * x + sb * e),
    };
    let guided = ClassifierFree {
        inner: guide.denoiser,
        scale: cfg.guidance_scale,
    };
    let eps_hat = guided.predict_noise(&x_t, t, &guide.cond)?.eps_hat;
    let w = cfg.weighting.weight(ab);
    let residual = Zip::from(&eps_hat.data).and(&eps.data).map_collect(|a, b| w * (a - b));
    if residual.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite SDS residual at t = {t}")));
    }
    let residual_norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut grad = vec![0.0; field.len()];
    for (slot, pose) in orthogonal_camera_rig().iter().enumerate() {
        let r: Array3<f64> = residual.slice(s![0, slot, .., .., ..]).to_owned();
        let img_grad = guide.codec.encode_vjp(&r)?;
        for (g, v) in grad.iter_mut().zip(render_vjp(field, pose, &img_grad)?) {
            *g += v;
        }
    }
    Ok(SdsStep { grad, t, residual_norm })
}

/// Draw `t` uniformly from `cfg.t_range` and `ε ~ N(0, I)`, then take the
/// SDS gradient.
pub fn sds_gradient(field: &RadianceField, guide: &SdsGuide<'_>, cfg: &SdsConfig, rng: &mut impl Rng) -> Result<SdsStep> {
    cfg.validate(guide.schedule)?;
    let t = rng.random_range(cfg.t_range.0..=cfg.t_range.1);
    let f = guide.codec.downsample();
    let side = cfg.render_size / f;
    let eps = MultiViewLatent {
        data: Array5::from_shape_simple_fn((1, 4, guide.codec.channels(), side, side), || StandardNormal.sample(&mut *rng)),
    };
    sds_gradient_at(field, guide, cfg, t, &eps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub t: usize,
    pub residual_norm: f64,
    pub update_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimization {
    pub field: RadianceField,
    pub log: Vec<IterationLog>,
}

/// Adam on the flat parameter vector, one SDS draw per iteration.
pub fn optimize_nerf(field: RadianceField, guide: &SdsGuide<'_>, cfg: &SdsConfig, seed: u64) -> Result<Optimization> {
    if cfg.iterations == 0 {
        return Err(Error::config("optimization needs at least one iteration"));
    }
    cfg.validate(guide.schedule)?;
    let (beta1, beta2, adam_eps) = (0.9, 0.99, 1e-8);
    let mut rng = rng_for(seed, "sds");
    let mut field = field;
    let mut m = vec![0.0; field.len()];
    let mut v = vec![0.0; field.len()];
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let step = sds_gradient(&field, guide, cfg, &mut rng).map_err(|e| match e {
            Error::Numeric(reason) => Error::Divergence { iteration: it, reason },
            other => other,
        })?;
        let lr = cfg.lr_at(it);
        let k = (it + 1) as i32;
        let mut update = vec![0.0; field.len()];
        for i in 0..field.len() {
            let g = step.grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / (1.0 - beta1.powi(k));
            let v_hat = v[i] / (1.0 - beta2.powi(k));
            update[i] = -lr * m_hat / (v_hat.sqrt() + adam_eps);
        }
        for (p, u) in field.params_mut().iter_mut().zip(&update) {
            *p += u;
        }
        if field.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                iteration: it,
                reason: "non-finite field parameters".into(),
            });
        }
        log.push(IterationLog {
            iteration: it,
            t: step.t,
            residual_norm: step.residual_norm,
            update_norm: l2(&update),
        });
    }
    Ok(Optimization { field, log })
}
