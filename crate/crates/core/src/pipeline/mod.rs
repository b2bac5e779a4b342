//! End-to-end runs: prompt-set generation, multi-view sampling, SDS 3D
//! generation and standalone scoring.
//!
//! Every stage draws from its own seed derived from the run seed, and every
//! output directory starts with `manifest.json`.

mod manifest;

pub use manifest::{Mode, RunManifest};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array5};

use crate::encoders::TextContext;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::{EvalSuite, MetricReport};
use crate::model::{ModelConfig, MultiViewModel};
use crate::mv_unet::{ddim_sample, ClassifierFree, Conditioning, MultiViewLatent};
use crate::prompting::{rig_pose, CameraPose, ControllerConfig, ImagePrompt, PromptSet, ViewLabel, RIG_ELEVATION, RIG_ORDER, RIG_RADIUS};
use crate::sds_nerf::{optimize_nerf, render, FieldConfig, IterationLog, RadianceField, SdsConfig, SdsGuide, TargetPull};
use crate::seed::derive_seed;

/// DDIM settings shared by prompt-set generation and view sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerOptions {
    pub steps: usize,
    pub guidance_scale: f64,
}

impl SamplerOptions {
    pub fn from_manifest(m: &RunManifest) -> Self {
        Self {
            steps: m.steps,
            guidance_scale: m.guidance_scale,
        }
    }
}

/// Sample the four rig-view latents under `cond`.
pub fn sample_views(model: &MultiViewModel, cond: &Conditioning, image_size: usize, opts: SamplerOptions, seed: u64) -> Result<MultiViewLatent> {
    let f = model.encoders.config.codec_downsample;
    let side = image_size / f;
    let guided = ClassifierFree {
        inner: &model.unet,
        scale: opts.guidance_scale,
    };
    ddim_sample(&guided, &model.schedule, opts.steps, seed, (1, model.config.unet.latent_channels, side, side), cond)
}

/// Decode every rig slot of the first batch item, in rig order.
pub fn decode_views(model: &MultiViewModel, latent: &MultiViewLatent) -> Result<Vec<ImageTensor>> {
    (0..4).map(|slot| model.encoders.decode_pixel_latent(&latent.frame(0, slot))).collect()
}

/// Multi-view sampling conditioned on `prompts` under `config`.
pub fn sample_multi_image(
    model: &MultiViewModel,
    text: &TextContext,
    prompts: &PromptSet,
    config: &ControllerConfig,
    image_size: usize,
    opts: SamplerOptions,
    seed: u64,
) -> Result<MultiViewLatent> {
    let cams = model.camera.embed_rig();
    let cond = Conditioning::multi_image(model, &cams, text, prompts, config)?;
    sample_views(model, &cond, image_size, opts, seed)
}

/// The single-image path: conditioning is built straight from the front
/// prompt, without a prompt set or controller config.
pub fn sample_single_image(model: &MultiViewModel, text: &TextContext, front: &ImagePrompt, image_size: usize, opts: SamplerOptions, seed: u64) -> Result<MultiViewLatent> {
    let cams = model.camera.embed_rig();
    let cond = Conditioning::single_image(model, &cams, text, front)?;
    sample_views(model, &cond, image_size, opts, seed)
}

/// Sample four views from the front image alone and use the back, left and
/// right decodes as prompts. The front prompt keeps the input image.
pub fn generate_prompt_set(front: &ImageTensor, model: &MultiViewModel, text: &TextContext, opts: SamplerOptions, seed: u64) -> Result<PromptSet> {
    let front = ImagePrompt::new(ViewLabel::Front, front.clone())?;
    let single = PromptSet::single(front.clone())?;
    let latent = sample_multi_image(
        model,
        text,
        &single,
        &ControllerConfig::single_image(),
        front.rgb().height(),
        opts,
        derive_seed(seed, "prompt-views"),
    )?;
    let mut prompts = vec![front];
    for label in [ViewLabel::Back, ViewLabel::Left, ViewLabel::Right] {
        let rgb = model.encoders.decode_pixel_latent(&latent.frame(0, label.rig_slot()))?;
        prompts.push(ImagePrompt::new(label, rgb)?);
    }
    PromptSet::new(prompts)
}

fn view_file(name: &str, label: ViewLabel) -> String {
    format!("{name}_{}.png", label.name())
}

fn load_model(m: &RunManifest) -> Result<MultiViewModel> {
    let mut model = MultiViewModel::init(ModelConfig::default(), m.weights_seed)?;
    if let Some(path) = &m.checkpoint {
        model.load_weights(path)?;
    }
    Ok(model)
}

fn load_square(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = ImageTensor::load_png(path)?;
    Ok(if img.height() == size && img.width() == size {
        img
    } else {
        img.resized(size, size)
    })
}

fn find_real_view(dir: &Path, label: ViewLabel) -> Option<PathBuf> {
    [label.name().to_string(), label.letter().to_string()]
        .iter()
        .map(|stem| dir.join(format!("{stem}.png")))
        .find(|p| p.is_file())
}

/// Prompt set for a generation run: the front image alone, user-supplied
/// views, or generated views, depending on what the config needs.
fn build_prompts(m: &RunManifest, model: &MultiViewModel, text: &TextContext, config: &ControllerConfig) -> Result<PromptSet> {
    let front = load_square(&m.image, m.image_size)?;
    let prompts = if config.required_views() == crate::prompting::ViewSet::single(ViewLabel::Front) {
        PromptSet::single(ImagePrompt::new(ViewLabel::Front, front)?)?
    } else if let Some(dir) = &m.real_views {
        let mut v = vec![ImagePrompt::new(ViewLabel::Front, front)?];
        for label in [ViewLabel::Back, ViewLabel::Left, ViewLabel::Right] {
            if let Some(path) = find_real_view(dir, label) {
                v.push(ImagePrompt::new(label, load_square(&path, m.image_size)?)?);
            }
        }
        PromptSet::new(v)?
    } else {
        generate_prompt_set(&front, model, text, SamplerOptions::from_manifest(m), m.seed)?
    };
    prompts.validate(config)?;
    Ok(prompts)
}

fn png_text(m: &RunManifest) -> Vec<(&'static str, String)> {
    vec![("seed", m.seed.to_string()), ("config", m.config.clone())]
}

fn start_run(m: &RunManifest, mode: Mode) -> Result<ControllerConfig> {
    m.validate()?;
    m.expect_mode(mode)?;
    let config = m.controller_config()?;
    fs::create_dir_all(&m.out)?;
    fs::write(m.out.join("manifest.json"), m.to_json()?)?;
    Ok(config)
}

fn write_report(m: &RunManifest, report: &MetricReport) -> Result<()> {
    fs::write(m.out.join("report.json"), report.to_json()? + "\n")?;
    Ok(())
}

fn score(m: &RunManifest, config: &ControllerConfig, images: &[ImageTensor], prompt: &ImageTensor, resized: bool) -> Result<MetricReport> {
    let eval = EvalSuite::toy(EvalSuite::DEFAULT_SEED).evaluate(images, prompt, &m.text)?;
    let mut report = MetricReport::from_evaluation(config, &eval)?;
    report.seed = Some(m.seed);
    if resized {
        report.resized = Some(eval.resized);
    }
    Ok(report)
}

/// Outputs of a multi-view run; `views` are in rig order.
#[derive(Debug, Clone)]
pub struct MvgenRun {
    pub views: Vec<ImageTensor>,
    pub report: MetricReport,
}

fn write_views(m: &RunManifest, views: &[ImageTensor]) -> Result<()> {
    let text = png_text(m);
    for (label, img) in RIG_ORDER.iter().zip(views) {
        img.save_png(&m.out.join(view_file(&m.name, *label)), &text)?;
    }
    ImageTensor::grid(views, 2, 2)?.save_png(&m.out.join("grid.png"), &text)
}

fn finish_mvgen(m: &RunManifest, config: &ControllerConfig, model: &MultiViewModel, latent: &MultiViewLatent) -> Result<MvgenRun> {
    let views = decode_views(model, latent)?;
    write_views(m, &views)?;
    let front = load_square(&m.image, m.image_size)?;
    let report = score(m, config, &views, &front, false)?;
    write_report(m, &report)?;
    Ok(MvgenRun { views, report })
}

/// Writes `manifest.json`, four `<name>_<view>.png`, `grid.png` and
/// `report.json` to `m.out`.
pub fn run_mv_generation(m: &RunManifest) -> Result<MvgenRun> {
    let config = start_run(m, Mode::Mvgen)?;
    let model = load_model(m)?;
    let text = model.encoders.encode_text(&m.text)?;
    let prompts = build_prompts(m, &model, &text, &config)?;
    let latent = sample_multi_image(&model, &text, &prompts, &config, m.image_size, SamplerOptions::from_manifest(m), derive_seed(m.seed, "mvgen"))?;
    finish_mvgen(m, &config, &model, &latent)
}

/// Single-image reference pipeline with the same outputs as
/// [`run_mv_generation`]. The manifest config must be `pixel(f) + local(f)`.
pub fn run_single_image_baseline(m: &RunManifest) -> Result<MvgenRun> {
    let config = start_run(m, Mode::Mvgen)?;
    if !config.is_single_image() {
        return Err(Error::config("the single-image pipeline only runs pixel(f) + local(f)"));
    }
    let model = load_model(m)?;
    let text = model.encoders.encode_text(&m.text)?;
    let front = ImagePrompt::new(ViewLabel::Front, load_square(&m.image, m.image_size)?)?;
    let latent = sample_single_image(&model, &text, &front, m.image_size, SamplerOptions::from_manifest(m), derive_seed(m.seed, "mvgen"))?;
    finish_mvgen(m, &config, &model, &latent)
}

/// Outputs of a 3D run.
#[derive(Debug, Clone)]
pub struct Gen3dRun {
    pub initial_field: RadianceField,
    pub field: RadianceField,
    pub log: Vec<IterationLog>,
    /// Rig renders of the final field, in rig order.
    pub views: Vec<ImageTensor>,
    /// Decoded pull target when mock guidance is on.
    pub target: Option<ImageTensor>,
    pub report: MetricReport,
}

/// Azimuths of the turntable renders, in degrees.
pub const TURNTABLE_DEGREES: [u32; 8] = [0, 45, 90, 135, 180, 225, 270, 315];

fn write_log(m: &RunManifest, log: &[IterationLog]) -> Result<()> {
    let mut file = fs::File::create(m.out.join("optimization.csv"))?;
    writeln!(file, "# seed={} config={}", m.seed, m.config)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["iteration", "residual_norm", "update_norm"])?;
    for row in log {
        w.write_record([row.iteration.to_string(), row.residual_norm.to_string(), row.update_norm.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// SDS run. Writes `manifest.json`, `optimization.csv`, the four rig
/// renders, the turntable `<name>_az<deg>.png` and `report.json`.
pub fn run_3d_generation(m: &RunManifest) -> Result<Gen3dRun> {
    let config = start_run(m, Mode::Gen3d)?;
    let model = load_model(m)?;
    let text = model.encoders.encode_text(&m.text)?;
    let prompts = build_prompts(m, &model, &text, &config)?;
    let initial_field = RadianceField::init(FieldConfig::default(), derive_seed(m.seed, "nerf-init"));
    let cfg = SdsConfig {
        iterations: m.iters,
        guidance_scale: m.guidance_scale,
        render_size: m.image_size,
        ..SdsConfig::default()
    };
    let (pull, target) = if m.mock_guidance {
        let z = model.encoders.encode_pixel_latent(prompts.front().rgb())?;
        let (c, h, w) = z.shape();
        let mut data = Array5::zeros((1, 4, c, h, w));
        for slot in 0..4 {
            data.slice_mut(s![0, slot, .., .., ..]).assign(&z.data);
        }
        let pull = TargetPull {
            target: MultiViewLatent::new(data)?,
            schedule: model.schedule.clone(),
        };
        (Some(pull), Some(model.encoders.decode_pixel_latent(&z)?))
    } else {
        (None, None)
    };
    let mut guide = SdsGuide::multi_image(&model, &text, &prompts, &config)?;
    if let Some(p) = &pull {
        guide.denoiser = p;
    }
    let (field, log) = if m.iters == 0 {
        (initial_field.clone(), Vec::new())
    } else {
        let out = optimize_nerf(initial_field.clone(), &guide, &cfg, derive_seed(m.seed, "sds"))?;
        (out.field, out.log)
    };
    write_log(m, &log)?;
    let text_chunks = png_text(m);
    let views = RIG_ORDER
        .iter()
        .map(|label| render(&field, &rig_pose(*label), m.image_size).map(|r| r.image))
        .collect::<Result<Vec<_>>>()?;
    for (label, img) in RIG_ORDER.iter().zip(&views) {
        img.save_png(&m.out.join(view_file(&m.name, *label)), &text_chunks)?;
    }
    for deg in TURNTABLE_DEGREES {
        let pose = CameraPose::look_at((deg as f64).to_radians(), RIG_ELEVATION, RIG_RADIUS);
        render(&field, &pose, m.image_size)?
            .image
            .save_png(&m.out.join(format!("{}_az{deg:03}.png", m.name)), &text_chunks)?;
    }
    let report = score(m, &config, &views, prompts.front().rgb(), false)?;
    write_report(m, &report)?;
    Ok(Gen3dRun {
        initial_field,
        field,
        log,
        views,
        target,
        report,
    })
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Score the PNGs in `m.images` against the prompt image `m.image` and
/// `m.text`. Writes `manifest.json` and `report.json`.
pub fn run_eval(m: &RunManifest) -> Result<MetricReport> {
    m.validate()?;
    m.expect_mode(Mode::Eval)?;
    let dir = m.images.as_ref().expect("validated");
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::EmptyImageSet(dir.clone()));
    }
    let images = paths.iter().map(|p| ImageTensor::load_png(p)).collect::<Result<Vec<_>>>()?;
    let prompt = ImageTensor::load_png(&m.image)?;
    let config = start_run(m, Mode::Eval)?;
    let report = score(m, &config, &images, &prompt, true)?;
    write_report(m, &report)?;
    Ok(report)
}

/// Dispatch on the manifest mode; returns the report.
pub fn run(m: &RunManifest) -> Result<MetricReport> {
    match m.mode {
        Mode::Mvgen => run_mv_generation(m).map(|r| r.report),
        Mode::Gen3d => run_3d_generation(m).map(|r| r.report),
        Mode::Eval => run_eval(m),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MultiViewModel {
        MultiViewModel::init(ModelConfig::default(), 0).unwrap()
    }

    #[test]
    fn prompt_set_keeps_the_front_image_and_is_deterministic() {
        let model = model();
        let text = model.encoders.encode_text("a toy").unwrap();
        let front = ImageTensor::synthetic_object(32, 7);
        let opts = SamplerOptions { steps: 3, guidance_scale: 1.0 };
        let a = generate_prompt_set(&front, &model, &text, opts, 5).unwrap();
        let b = generate_prompt_set(&front, &model, &text, opts, 5).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a.labels().letters(), "fblr");
        assert_eq!(a.front().rgb(), &front);
        for label in [ViewLabel::Back, ViewLabel::Left, ViewLabel::Right] {
            assert_eq!(a.get(label).unwrap().rgb(), b.get(label).unwrap().rgb());
        }
    }

    #[test]
    fn missing_real_views_fail_before_sampling() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("front.png");
        ImageTensor::synthetic_object(32, 1).save_png(&img, &[]).unwrap();
        let views = dir.path().join("views");
        fs::create_dir(&views).unwrap();
        ImageTensor::synthetic_object(32, 2).save_png(&views.join("back.png"), &[]).unwrap();
        let mut m = RunManifest::new(Mode::Mvgen, "pixel(f) + local(fl)", &img, dir.path().join("out"), 0).unwrap();
        m.real_views = Some(views);
        assert!(matches!(run_mv_generation(&m), Err(Error::Config(_))));
        assert!(!m.out.join("grid.png").exists());
    }

    #[test]
    fn eval_of_an_empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("p.png");
        ImageTensor::synthetic_object(32, 1).save_png(&img, &[]).unwrap();
        let empty = dir.path().join("empty");
        fs::create_dir(&empty).unwrap();
        let mut m = RunManifest::new(Mode::Eval, "pixel(f) + local(f)", &img, dir.path().join("out"), 0).unwrap();
        m.images = Some(empty);
        assert!(matches!(run_eval(&m), Err(Error::EmptyImageSet(_))));
    }

    #[test]
    fn eval_of_the_prompt_image_itself_scores_clip_im_100() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("p.png");
        ImageTensor::synthetic_object(32, 4).save_png(&img, &[]).unwrap();
        let images = dir.path().join("imgs");
        fs::create_dir(&images).unwrap();
        fs::copy(&img, images.join("p.png")).unwrap();
        ImageTensor::synthetic_object(64, 5).save_png(&images.join("q.png"), &[]).unwrap();
        let mut m = RunManifest::new(Mode::Eval, "pixel(f) + local(f)", &img, dir.path().join("out"), 0).unwrap();
        m.images = Some(images.clone());
        let both = run_eval(&m).unwrap();
        assert_eq!(both.resized, Some(1));
        fs::remove_file(images.join("q.png")).unwrap();
        let only_prompt = run_eval(&m).unwrap();
        assert_eq!(only_prompt.clip_im.mean, 100.0);
        assert_eq!(only_prompt.resized, Some(0));
    }

    #[test]
    fn zero_iteration_3d_run_still_scores() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("obj.png");
        ImageTensor::synthetic_object(32, 3).save_png(&img, &[]).unwrap();
        let mut m = RunManifest::new(Mode::Gen3d, "pixel(f) + local(f)", &img, dir.path().join("out"), 2).unwrap();
        m.iters = 0;
        let run = run_3d_generation(&m).unwrap();
        assert_eq!(run.field, run.initial_field);
        assert_eq!(run.report.n_images, 4);
        assert!(m.out.join("obj_az090.png").is_file());
        let csv = fs::read_to_string(m.out.join("optimization.csv")).unwrap();
        assert_eq!(csv, "# seed=2 config=pixel(f) + local(f)\niteration,residual_norm,update_norm\n");
    }
}
