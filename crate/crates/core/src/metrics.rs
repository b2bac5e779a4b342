//! Quality-only Inception Score, CLIP-style text and image scores, and
//! report assembly.
//!
//! QIS is `exp(KL(p(y|x) ‖ uniform))` per image: the Inception Score with the
//! marginal replaced by the uniform distribution, so only confidence counts.
//! Standard deviations are population deviations over images. All
//! reductions run left to right.

use std::fmt::Debug;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{Activation, Linear, Mlp, ParamInit};
use crate::prompting::ControllerConfig;
use crate::seed::derive_seed;

const PROB_TOL: f64 = 1e-6;

/// Class posterior of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    probs: Vec<f64>,
}

impl ClassProbabilities {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Probability("empty probability vector".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Probability("probabilities must be finite and nonnegative".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::Probability(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    /// `exp(Σ p log p + log C)`, evaluated as `Π (pC)^p` so that one-hot
    /// vectors give exactly `C` and uniform ones exactly 1.
    pub fn quality_score(&self) -> f64 {
        let c = self.classes() as f64;
        self.probs.iter().map(|p| (p * c).powf(*p)).product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::config("cannot summarize zero samples"));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", format_mean_std(self.mean, self.std))
    }
}

/// Summary of one metric over an image set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricResult {
    pub stats: MeanStd,
    pub n_images: usize,
}

impl MetricResult {
    fn from_scores(scores: &[f64]) -> Result<Self> {
        Ok(Self {
            stats: MeanStd::from_samples(scores)?,
            n_images: scores.len(),
        })
    }
}

pub fn quality_inception_score(probs: &[ClassProbabilities]) -> Result<MetricResult> {
    let scores: Vec<f64> = probs.iter().map(ClassProbabilities::quality_score).collect();
    MetricResult::from_scores(&scores)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("embedding dims differ: {} vs {}", a.len(), b.len())));
    }
    let sa = a.iter().map(|x| x * x).sum::<f64>();
    let sb = b.iter().map(|x| x * x).sum::<f64>();
    if !(sa > 0.0 && sb > 0.0) || !sa.is_finite() || !sb.is_finite() {
        return Err(Error::numeric("zero-norm or non-finite embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // one square root, so cos(a, a) is exactly 1
    Ok((dot / (sa * sb).sqrt()).clamp(-1.0, 1.0))
}

/// `100 · cos(e_i, reference)` summarized over `embeddings`.
pub fn cosine_scores(embeddings: &[Vec<f64>], reference: &[f64]) -> Result<MetricResult> {
    let scores = embeddings
        .iter()
        .map(|e| cosine(e, reference).map(|c| 100.0 * c))
        .collect::<Result<Vec<_>>>()?;
    MetricResult::from_scores(&scores)
}

pub trait Classifier: Debug + Send + Sync {
    fn input_size(&self) -> usize;
    fn classify(&self, image: &ImageTensor) -> Result<ClassProbabilities>;
}

pub trait ImageEmbedder: Debug + Send + Sync {
    fn input_size(&self) -> usize;
    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

pub trait TextEmbedder: Debug + Send + Sync {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub fn clip_image_score(images: &[ImageTensor], prompt_image: &ImageTensor, embedder: &dyn ImageEmbedder) -> Result<MetricResult> {
    let reference = embedder.embed_image(prompt_image)?;
    let embs = images.iter().map(|im| embedder.embed_image(im)).collect::<Result<Vec<_>>>()?;
    cosine_scores(&embs, &reference)
}

pub fn clip_text_score(images: &[ImageTensor], text: &str, text_embedder: &dyn TextEmbedder, image_embedder: &dyn ImageEmbedder) -> Result<MetricResult> {
    let reference = text_embedder.embed_text(text)?;
    let embs = images.iter().map(|im| image_embedder.embed_image(im)).collect::<Result<Vec<_>>>()?;
    cosine_scores(&embs, &reference)
}

/// Average-pool an image into a `cells × cells × 3` grid, mapped to [-1, 1].
fn pooled_features(image: &ImageTensor, size: usize, cells: usize) -> Result<Array1<f64>> {
    if image.height() != size || image.width() != size {
        return Err(Error::dim(format!("evaluator expects {size}x{size}, got {}x{}", image.height(), image.width())));
    }
    let cell = size / cells;
    let v = image.view();
    let mut out = Array1::zeros(cells * cells * 3);
    for cy in 0..cells {
        for cx in 0..cells {
            for c in 0..3 {
                let mut acc = 0.0;
                for y in cy * cell..(cy + 1) * cell {
                    for x in cx * cell..(cx + 1) * cell {
                        acc += v[[y, x, c]];
                    }
                }
                out[(cy * cells + cx) * 3 + c] = 2.0 * acc / (cell * cell) as f64 - 1.0;
            }
        }
    }
    Ok(out)
}

fn row(x: Array1<f64>) -> Array2<f64> {
    x.insert_axis(ndarray::Axis(0))
}

/// Softmax over a linear read-out of pooled colors.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyClassifier {
    size: usize,
    head: Linear,
}

impl ToyClassifier {
    const CELLS: usize = 4;

    pub fn init(init: &mut ParamInit, size: usize, classes: usize) -> Self {
        let d = Self::CELLS * Self::CELLS * 3;
        Self {
            size,
            head: Linear::new(init.matrix(d, classes, 2.0 / (d as f64).sqrt()), init.vector(classes, 0.1)).expect("shapes agree"),
        }
    }
}

impl Classifier for ToyClassifier {
    fn input_size(&self) -> usize {
        self.size
    }

    fn classify(&self, image: &ImageTensor) -> Result<ClassProbabilities> {
        let mut logits = self.head.forward(row(pooled_features(image, self.size, Self::CELLS)?).view())?;
        crate::nn::softmax_rows(&mut logits);
        let mut probs = logits.row(0).to_vec();
        // renormalize so rounding never trips validation
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
        ClassProbabilities::new(probs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyImageEmbedder {
    size: usize,
    mlp: Mlp,
}

impl ToyImageEmbedder {
    const CELLS: usize = 8;

    pub fn init(init: &mut ParamInit, size: usize, dim: usize) -> Self {
        let d = Self::CELLS * Self::CELLS * 3;
        Self {
            size,
            mlp: Mlp::init(init, d, 64, dim, Activation::Tanh),
        }
    }
}

impl ImageEmbedder for ToyImageEmbedder {
    fn input_size(&self) -> usize {
        self.size
    }

    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.mlp.forward(row(pooled_features(image, self.size, Self::CELLS)?).view())?.row(0).to_vec())
    }
}

/// Mean of hash-seeded word vectors followed by a linear map into the image
/// embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTextEmbedder {
    vocab_seed: u64,
    proj: Linear,
}

impl ToyTextEmbedder {
    pub fn init(init: &mut ParamInit, dim: usize, vocab_seed: u64) -> Self {
        Self {
            vocab_seed,
            proj: Linear::init(init, dim, dim),
        }
    }
}

impl TextEmbedder for ToyTextEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if words.is_empty() {
            return Err(Error::config("text prompt must contain at least one word"));
        }
        let d = self.proj.d_in();
        let mut acc = Array1::zeros(d);
        for w in &words {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.vocab_seed, &format!("word:{w}")));
            acc += &Array1::from_shape_fn(d, |_| StandardNormal.sample(&mut rng));
        }
        acc /= words.len() as f64;
        Ok(self.proj.forward(row(acc).view())?.row(0).to_vec())
    }
}

/// Classifier plus embedders, with the common evaluator input size.
#[derive(Debug)]
pub struct EvalSuite {
    pub classifier: Box<dyn Classifier>,
    pub image_embedder: Box<dyn ImageEmbedder>,
    pub text_embedder: Box<dyn TextEmbedder>,
}

/// Scores of one image set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub qis: MetricResult,
    pub clip_tx: MetricResult,
    pub clip_im: MetricResult,
    /// Images that had to be resized to the evaluator's input size.
    pub resized: usize,
}

impl EvalSuite {
    /// Seed of the evaluator used by every run, so scores stay comparable.
    pub const DEFAULT_SEED: u64 = 0;
    pub const INPUT_SIZE: usize = 32;
    pub const CLASSES: usize = 10;
    pub const EMBED_DIM: usize = 32;

    pub fn toy(seed: u64) -> Self {
        let mut init = ParamInit::new(derive_seed(seed, "evaluator"));
        Self {
            classifier: Box::new(ToyClassifier::init(&mut init, Self::INPUT_SIZE, Self::CLASSES)),
            image_embedder: Box::new(ToyImageEmbedder::init(&mut init, Self::INPUT_SIZE, Self::EMBED_DIM)),
            text_embedder: Box::new(ToyTextEmbedder::init(&mut init, Self::EMBED_DIM, derive_seed(seed, "evaluator-vocab"))),
        }
    }

    fn fit(&self, size: usize, image: &ImageTensor) -> (ImageTensor, bool) {
        if image.height() == size && image.width() == size {
            (image.clone(), false)
        } else {
            (image.resized(size, size), true)
        }
    }

    /// Score `images` against `prompt_image` and `text`. Every image (and the
    /// prompt image) is first resized to the evaluator's input size.
    pub fn evaluate(&self, images: &[ImageTensor], prompt_image: &ImageTensor, text: &str) -> Result<Evaluation> {
        if images.is_empty() {
            return Err(Error::config("no images to evaluate"));
        }
        let size = self.image_embedder.input_size();
        if self.classifier.input_size() != size {
            return Err(Error::config("classifier and embedder input sizes differ"));
        }
        let mut resized = 0;
        let fitted: Vec<ImageTensor> = images
            .iter()
            .map(|im| {
                let (out, changed) = self.fit(size, im);
                resized += changed as usize;
                out
            })
            .collect();
        let (prompt, _) = self.fit(size, prompt_image);
        let probs = fitted.iter().map(|im| self.classifier.classify(im)).collect::<Result<Vec<_>>>()?;
        Ok(Evaluation {
            qis: quality_inception_score(&probs)?,
            clip_tx: clip_text_score(&fitted, text, self.text_embedder.as_ref(), self.image_embedder.as_ref())?,
            clip_im: clip_image_score(&fitted, &prompt, self.image_embedder.as_ref())?,
            resized,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: String,
    pub n_images: usize,
    pub qis: MeanStd,
    pub clip_tx: MeanStd,
    pub clip_im: MeanStd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resized: Option<usize>,
}

pub fn build_report(config: &ControllerConfig, qis: &MetricResult, clip_tx: &MetricResult, clip_im: &MetricResult) -> Result<MetricReport> {
    let n = qis.n_images;
    if clip_tx.n_images != n || clip_im.n_images != n {
        return Err(Error::config(format!(
            "metrics were computed on different image counts: {n}, {}, {}",
            clip_tx.n_images, clip_im.n_images
        )));
    }
    Ok(MetricReport {
        config: config.to_string(),
        n_images: n,
        qis: qis.stats,
        clip_tx: clip_tx.stats,
        clip_im: clip_im.stats,
        seed: None,
        resized: None,
    })
}

impl MetricReport {
    pub fn from_evaluation(config: &ControllerConfig, eval: &Evaluation) -> Result<Self> {
        build_report(config, &eval.qis, &eval.clip_tx, &eval.clip_im)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn table_header() -> String {
        format!("{:<28} {:>4}  {:>12}  {:>12}  {:>12}", "config", "n", "QIS", "CLIP(TX)", "CLIP(IM)")
    }

    pub fn table_row(&self) -> String {
        format!(
            "{:<28} {:>4}  {:>12}  {:>12}  {:>12}",
            self.config, self.n_images, self.qis, self.clip_tx, self.clip_im
        )
    }

    pub fn to_table(&self) -> String {
        format!("{}\n{}\n", Self::table_header(), self.table_row())
    }
}

/// Mean to two decimals, std to three significant figures; a zero std is
/// written `0.00`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{}", format_sig3(std))
}

fn format_sig3(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0.00".into() } else { x.to_string() };
    }
    let mag = x.abs().log10().floor() as i32;
    let unit = 10f64.powi(mag - 2);
    let rounded = (x / unit).round() * unit;
    let mag = rounded.abs().log10().floor() as i32;
    let decimals = (2 - mag).max(0) as usize;
    format!("{rounded:.decimals$}")
}
