use crate::error::{Error, Result};

/// Cumulative signal levels `ᾱ_t` for timesteps `0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    const MAX_BETA: f64 = 0.999;

    /// Cosine schedule with offset `s = 0.008`; index `t` holds `ᾱ` after
    /// `t + 1` noising steps.
    pub fn cosine(steps: usize) -> Self {
        assert!(steps > 0, "schedule needs at least one step");
        let s = 0.008;
        let f = |t: f64| ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for i in 0..steps {
            let beta = (1.0 - f((i + 1) as f64) / f(i as f64)).min(Self::MAX_BETA);
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Self { alpha_bar }
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::config("empty noise schedule"));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::config("alpha_bar values must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("alpha_bar must be strictly decreasing"));
        }
        Ok(Self { alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Evenly spaced DDIM timesteps, noisiest first: `T-1, T-1-r, …` with
    /// `r = T / steps`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 {
            return Err(Error::config("DDIM needs at least one step"));
        }
        if steps > self.len() {
            return Err(Error::config(format!(
                "{steps} DDIM steps exceed the schedule length {}",
                self.len()
            )));
        }
        let ratio = self.len() / steps;
        Ok((0..steps).map(|i| self.len() - 1 - i * ratio).collect())
    }
}
