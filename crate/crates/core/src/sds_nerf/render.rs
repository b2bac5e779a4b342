use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rayon::prelude::*;

use super::field::{PointEval, RadianceField};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::prompting::{CameraPose, RIG_FOV_Y_DEG};

pub const SAMPLES_PER_RAY: usize = 64;
/// Half-depth of the sampled slab around the origin along each ray.
pub const SCENE_HALF_DEPTH: f64 = 1.75;

/// Quadrature samples along one ray, near to far.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub positions: Vec<[f64; 3]>,
    pub deltas: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl RaySamples {
    pub fn new(positions: Vec<[f64; 3]>, deltas: Vec<f64>, sigmas: Vec<f64>, colors: Vec<[f64; 3]>) -> Result<Self> {
        let n = deltas.len();
        if positions.len() != n || sigmas.len() != n || colors.len() != n {
            return Err(Error::dim("ray sample arrays differ in length"));
        }
        if deltas.iter().any(|d| !(*d > 0.0)) || sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::numeric("ray samples need positive deltas and nonnegative densities"));
        }
        Ok(Self {
            positions,
            deltas,
            sigmas,
            colors,
        })
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

/// Result of alpha compositing one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    /// `T_0 … T_n`; the last entry is the transmittance left for the background.
    pub transmittance: Vec<f64>,
}

impl Composite {
    pub fn final_transmittance(&self) -> f64 {
        *self.transmittance.last().expect("T_0 always present")
    }

    pub fn opacity(&self) -> f64 {
        1.0 - self.final_transmittance()
    }
}

/// `w_i = T_i (1 − e^{−σ_i δ_i})`, `T_{i+1} = T_i e^{−σ_i δ_i}`,
/// `C = Σ w_i c_i + T_n · bg`.
pub fn composite(samples: &RaySamples, background: [f64; 3]) -> Composite {
    let n = samples.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n + 1);
    let mut color = [0.0; 3];
    let mut t = 1.0;
    transmittance.push(t);
    for i in 0..n {
        let keep = (-samples.sigmas[i] * samples.deltas[i]).exp();
        let w = t * (1.0 - keep);
        for (acc, c) in color.iter_mut().zip(samples.colors[i].iter()) {
            *acc += w * c;
        }
        weights.push(w);
        t *= keep;
        transmittance.push(t);
    }
    for (acc, b) in color.iter_mut().zip(background.iter()) {
        *acc += t * b;
    }
    Composite {
        color,
        weights,
        transmittance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    /// Midpoints of `n` equal slabs between near and far.
    pub fn sample_points(&self, n: usize) -> (Vec<[f64; 3]>, Vec<f64>) {
        let step = (self.far - self.near) / n as f64;
        let points = (0..n)
            .map(|k| {
                let p = self.origin + self.direction * (self.near + (k as f64 + 0.5) * step);
                [p.x, p.y, p.z]
            })
            .collect();
        (points, vec![step; n])
    }
}

/// Pinhole ray through the center of pixel `(row, col)`.
pub fn camera_ray(pose: &CameraPose, resolution: usize, row: usize, col: usize) -> Ray {
    let tan = (RIG_FOV_Y_DEG.to_radians() / 2.0).tan();
    let u = ((col as f64 + 0.5) / resolution as f64 * 2.0 - 1.0) * tan;
    let v = ((row as f64 + 0.5) / resolution as f64 * 2.0 - 1.0) * tan;
    let d_cam = Vector3::new(u, -v, -1.0).normalize();
    let origin = pose.center();
    let dist = origin.norm();
    Ray {
        origin,
        direction: pose.camera_to_world() * d_cam,
        near: (dist - SCENE_HALF_DEPTH).max(1e-3),
        far: dist + SCENE_HALF_DEPTH,
    }
}

/// Rendered image plus its per-pixel opacity `1 − T_final`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub image: ImageTensor,
    pub opacity: Array2<f64>,
}

struct TracedRay {
    points: Vec<PointEval>,
    deltas: Vec<f64>,
    composite: Composite,
}

fn trace(field: &RadianceField, ray: &Ray) -> TracedRay {
    let (positions, deltas) = ray.sample_points(SAMPLES_PER_RAY);
    let points: Vec<PointEval> = positions.iter().map(|p| field.eval(*p)).collect();
    let samples = RaySamples {
        sigmas: points.iter().map(|p| p.sigma).collect(),
        colors: points.iter().map(|p| p.rgb).collect(),
        positions,
        deltas: deltas.clone(),
    };
    TracedRay {
        composite: composite(&samples, field.background()),
        points,
        deltas,
    }
}

/// Render a square image; rows are traced in parallel.
pub fn render(field: &RadianceField, pose: &CameraPose, resolution: usize) -> Result<Rendering> {
    if resolution == 0 {
        return Err(Error::dim("render resolution must be positive"));
    }
    let rows: Vec<Vec<Composite>> = (0..resolution)
        .into_par_iter()
        .map(|r| {
            (0..resolution)
                .map(|c| trace(field, &camera_ray(pose, resolution, r, c)).composite)
                .collect()
        })
        .collect();
    let mut rgb = Array3::zeros((resolution, resolution, 3));
    let mut opacity = Array2::zeros((resolution, resolution));
    for (r, row) in rows.iter().enumerate() {
        for (c, comp) in row.iter().enumerate() {
            for k in 0..3 {
                rgb[[r, c, k]] = comp.color[k];
            }
            opacity[[r, c]] = comp.opacity();
        }
    }
    Ok(Rendering {
        image: ImageTensor::new(rgb)?,
        opacity,
    })
}

/// Pull an image cotangent `∂L/∂I` (`H × W × 3`) back to field parameters.
///
/// With `τ_k = σ_k δ_k`, `∂C/∂τ_k = T_{k+1} c_k − (Σ_{j>k} w_j c_j + T_n bg)`
/// and `∂C/∂c_k = w_k`. Per-row partial gradients are summed in row order.
pub fn render_vjp(field: &RadianceField, pose: &CameraPose, grad_image: &Array3<f64>) -> Result<Vec<f64>> {
    let (h, w, ch) = grad_image.dim();
    if h != w || ch != 3 {
        return Err(Error::dim(format!("image cotangent must be square RGB, got {h}x{w}x{ch}")));
    }
    let bg = field.background();
    let partials: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut grad = vec![0.0; field.len()];
            for c in 0..w {
                let g = [grad_image[[r, c, 0]], grad_image[[r, c, 1]], grad_image[[r, c, 2]]];
                if g == [0.0; 3] {
                    continue;
                }
                let ray = trace(field, &camera_ray(pose, h, r, c));
                let comp = &ray.composite;
                let n = ray.points.len();
                let t_n = comp.final_transmittance();
                let mut suffix = [t_n * bg[0], t_n * bg[1], t_n * bg[2]];
                for k in (0..n).rev() {
                    let p = &ray.points[k];
                    let t_next = comp.transmittance[k + 1];
                    let d_tau: f64 = (0..3).map(|i| g[i] * (t_next * p.rgb[i] - suffix[i])).sum();
                    let wk = comp.weights[k];
                    field.backward(p, d_tau * ray.deltas[k], [g[0] * wk, g[1] * wk, g[2] * wk], &mut grad);
                    for i in 0..3 {
                        suffix[i] += wk * p.rgb[i];
                    }
                }
            }
            grad
        })
        .collect();
    let mut total = vec![0.0; field.len()];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    Ok(total)
}
