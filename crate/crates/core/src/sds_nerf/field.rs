use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::error::{Error, Result};
use crate::nn::{join, ParamInit, Parameters};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    /// Positional-encoding octaves; `0` feeds raw coordinates only.
    pub pe_freqs: usize,
    pub hidden: usize,
    pub background: [f64; 3],
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            pe_freqs: 2,
            hidden: 16,
            background: [1.0, 1.0, 1.0],
        }
    }
}

impl FieldConfig {
    pub fn input_dim(&self) -> usize {
        3 + 6 * self.pe_freqs
    }

    pub fn parameter_count(&self) -> usize {
        let (d, h) = (self.input_dim(), self.hidden);
        d * h + h + h * 4 + 4
    }
}

/// Per-point quantities kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PointEval {
    pub sigma: f64,
    pub rgb: [f64; 3],
    encoded: Vec<f64>,
    hidden: Vec<f64>,
    raw: [f64; 4],
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Positional-encoding MLP with one tanh hidden layer. Density is
/// `softplus(o₀)`, color is `sigmoid(o₁..₃)`. Parameters live in one flat
/// vector laid out as `[W1 (d×h), b1, W2 (h×4), b2]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceField {
    config: FieldConfig,
    params: Vec<f64>,
}

impl RadianceField {
    pub fn init(config: FieldConfig, seed: u64) -> Self {
        let mut init = ParamInit::new(seed);
        let (d, h) = (config.input_dim(), config.hidden);
        let mut params = Vec::with_capacity(config.parameter_count());
        params.extend(init.matrix(d, h, 1.0 / (d as f64).sqrt()).iter());
        params.extend(init.vector(h, 0.1).iter());
        params.extend(init.matrix(h, 4, 0.5 / (h as f64).sqrt()).iter());
        // start mostly transparent
        params.extend([-1.0, 0.0, 0.0, 0.0]);
        Self { config, params }
    }

    pub fn from_params(config: FieldConfig, params: Vec<f64>) -> Result<Self> {
        if params.len() != config.parameter_count() {
            return Err(Error::dim(format!(
                "field expects {} parameters, got {}",
                config.parameter_count(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite field parameters"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn background(&self) -> [f64; 3] {
        self.config.background
    }

    fn encode(&self, x: [f64; 3]) -> Vec<f64> {
        let mut e = Vec::with_capacity(self.config.input_dim());
        e.extend_from_slice(&x);
        for k in 0..self.config.pe_freqs {
            let f = std::f64::consts::PI * (1u64 << k) as f64;
            e.extend(x.iter().map(|v| (f * v).sin()));
            e.extend(x.iter().map(|v| (f * v).cos()));
        }
        e
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let (d, h) = (self.config.input_dim(), self.config.hidden);
        let b1 = d * h;
        let w2 = b1 + h;
        (b1, w2, w2 + h * 4)
    }

    pub fn eval(&self, x: [f64; 3]) -> PointEval {
        let h = self.config.hidden;
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let encoded = self.encode(x);
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                let pre = encoded.iter().enumerate().map(|(i, e)| e * p[i * h + j]).sum::<f64>() + p[b1 + j];
                pre.tanh()
            })
            .collect();
        let mut raw = [0.0; 4];
        for (k, r) in raw.iter_mut().enumerate() {
            *r = hidden.iter().enumerate().map(|(j, v)| v * p[w2 + j * 4 + k]).sum::<f64>() + p[b2 + k];
        }
        PointEval {
            sigma: softplus(raw[0]),
            rgb: [sigmoid(raw[1]), sigmoid(raw[2]), sigmoid(raw[3])],
            encoded,
            hidden,
            raw,
        }
    }

    /// Accumulate `∂L/∂θ` into `grad` given `∂L/∂σ` and `∂L/∂rgb` at a point.
    pub fn backward(&self, point: &PointEval, d_sigma: f64, d_rgb: [f64; 3], grad: &mut [f64]) {
        let h = self.config.hidden;
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut d_raw = [d_sigma * sigmoid(point.raw[0]), 0.0, 0.0, 0.0];
        for k in 0..3 {
            let c = point.rgb[k];
            d_raw[k + 1] = d_rgb[k] * c * (1.0 - c);
        }
        for (k, d) in d_raw.iter().enumerate() {
            grad[b2 + k] += d;
        }
        for j in 0..h {
            let hj = point.hidden[j];
            let mut d_h = 0.0;
            for (k, d) in d_raw.iter().enumerate() {
                grad[w2 + j * 4 + k] += hj * d;
                d_h += p[w2 + j * 4 + k] * d;
            }
            let d_pre = d_h * (1.0 - hj * hj);
            grad[b1 + j] += d_pre;
            for (i, e) in point.encoded.iter().enumerate() {
                grad[i * h + j] += e * d_pre;
            }
        }
    }
}

impl Parameters for RadianceField {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>)) {
        let v = ndarray::ArrayView1::from(&self.params[..]);
        f(&join(prefix, "params"), v.into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>)) {
        let v = ndarray::ArrayViewMut1::from(&mut self.params[..]);
        f(&join(prefix, "params"), v.into_dyn());
    }
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_field_fits_the_toy_budget() {
        let f = RadianceField::init(FieldConfig::default(), 0);
        assert_eq!(f.config().input_dim(), 15);
        assert_eq!(f.len(), 324);
        assert!(f.len() <= 500);
        let tiny = FieldConfig { pe_freqs: 0, hidden: 1, ..FieldConfig::default() };
        assert_eq!(tiny.parameter_count(), 12);
    }

    #[test]
    fn outputs_respect_their_ranges() {
        let f = RadianceField::init(FieldConfig::default(), 1);
        for i in 0..50 {
            let x = [(i as f64 * 0.37).sin() * 3.0, (i as f64 * 0.11).cos() * 2.0, i as f64 * 0.05 - 1.0];
            let p = f.eval(x);
            assert!(p.sigma >= 0.0);
            assert!(p.rgb.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let f = RadianceField::init(FieldConfig::default(), 2);
        let x = [0.3, -0.2, 0.5];
        let (ds, dc) = (0.7, [0.2, -1.1, 0.4]);
        let loss = |f: &RadianceField| {
            let p = f.eval(x);
            ds * p.sigma + dc.iter().zip(p.rgb.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut grad = vec![0.0; f.len()];
        f.backward(&f.eval(x), ds, dc, &mut grad);
        for i in (0..f.len()).step_by(7) {
            let h = 1e-6;
            let mut plus = f.clone();
            plus.params_mut()[i] += h;
            let mut minus = f.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn from_params_checks_length() {
        assert!(RadianceField::from_params(FieldConfig::default(), vec![0.0; 3]).is_err());
    }
}
