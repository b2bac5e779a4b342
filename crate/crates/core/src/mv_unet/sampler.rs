use ndarray::{Array5, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Conditioning, Denoiser, DenoiserOutput, MultiViewLatent, NoiseSchedule};
use crate::error::{Error, Result};

/// Classifier-free guidance around another denoiser:
/// `ε̂ = ε_u + s · (ε_c − ε_u)`. A scale of 1 skips the unconditional pass.
pub struct ClassifierFree<'a, D: ?Sized> {
    pub inner: &'a D,
    pub scale: f64,
}

impl<D: Denoiser + ?Sized> Denoiser for ClassifierFree<'_, D> {
    fn predict_noise(&self, noisy: &MultiViewLatent, t: usize, cond: &Conditioning) -> Result<DenoiserOutput> {
        let conditional = self.inner.predict_noise(noisy, t, cond)?;
        if self.scale == 1.0 {
            return Ok(conditional);
        }
        let unconditional = self.inner.predict_noise(noisy, t, &cond.unconditional())?;
        let s = self.scale;
        let data = Zip::from(&unconditional.eps_hat.data)
            .and(&conditional.eps_hat.data)
            .map_collect(|u, c| u + s * (c - u));
        Ok(DenoiserOutput {
            eps_hat: MultiViewLatent { data },
        })
    }
}

/// One η = 0 DDIM update. Returns `(x_prev, x̂0)` where
/// `x̂0 = (x_t − √(1−ᾱ_t) ε̂) / √ᾱ_t` and
/// `x_prev = √ᾱ_prev x̂0 + √(1−ᾱ_prev) ε̂`.
pub fn ddim_step(x_t: &Array5<f64>, eps: &Array5<f64>, alpha_bar_t: f64, alpha_bar_prev: f64) -> (Array5<f64>, Array5<f64>) {
    let (sa, sb) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).sqrt());
    let (pa, pb) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    let x0 = Zip::from(x_t).and(eps).map_collect(|x, e| (x - sb * e) / sa);
    let prev = Zip::from(&x0).and(eps).map_collect(|x0, e| pa * x0 + pb * e);
    (prev, x0)
}

/// Standard normal starting latent drawn from `seed`.
pub fn initial_noise(seed: u64, shape: (usize, usize, usize, usize)) -> MultiViewLatent {
    let (b, c, h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MultiViewLatent {
        data: Array5::from_shape_simple_fn((b, 4, c, h, w), || StandardNormal.sample(&mut rng)),
    }
}

/// Deterministic DDIM from seeded Gaussian noise of shape `(b, c, h, w)`.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
    shape: (usize, usize, usize, usize),
    cond: &Conditioning,
) -> Result<MultiViewLatent> {
    schedule.ddim_timesteps(steps)?;
    ddim_sample_from(model, schedule, steps, initial_noise(seed, shape), cond)
}

/// DDIM from a given starting latent. The final step lands on `ᾱ = 1`, so
/// the result is the last `x̂0`.
pub fn ddim_sample_from<D: Denoiser + ?Sized>(
    model: &D,
    schedule: &NoiseSchedule,
    steps: usize,
    start: MultiViewLatent,
    cond: &Conditioning,
) -> Result<MultiViewLatent> {
    let timesteps = schedule.ddim_timesteps(steps)?;
    let mut x = start;
    for (i, &t) in timesteps.iter().enumerate() {
        let eps = model.predict_noise(&x, t, cond)?.eps_hat;
        if eps.data.dim() != x.data.dim() {
            return Err(Error::dim("denoiser output shape differs from its input"));
        }
        let prev_alpha = timesteps.get(i + 1).map_or(1.0, |&p| schedule.alpha_bar(p));
        let (next, _) = ddim_step(&x.data, &eps.data, schedule.alpha_bar(t), prev_alpha);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite latent after DDIM step at t = {t}")));
        }
        x = MultiViewLatent { data: next };
    }
    Ok(x)
}
