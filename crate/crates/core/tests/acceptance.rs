//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::error::Error as StdError;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Array4, Array5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use mvprompt_core::controllers::{build_local_context, concat_local_tokens, stack_frames, stack_pixel_latents, FrameRole, StackedFrames};
use mvprompt_core::image::ImageTensor;
use mvprompt_core::metrics::{clip_image_score, cosine, ClassProbabilities, EvalSuite};
use mvprompt_core::model::{ModelConfig, MultiViewModel};
use mvprompt_core::mv_unet::{
    cross_attention, cross_attention_frames, ddim_sample, ddim_sample_from, ddim_step, dense_3d_attention, dense_attention_frames, initial_noise,
    unet_forward, unet_forward_single_image, Conditioning, Denoiser, DenoiserOutput, MultiViewLatent, NoiseSchedule,
};
use mvprompt_core::nn::{Attention, ParamInit};
use mvprompt_core::pipeline::{run_mv_generation, run_single_image_baseline, sample_multi_image, sample_single_image, Mode, RunManifest, SamplerOptions};
use mvprompt_core::prompting::{parse_controller_config, ControllerConfig, ImagePrompt, PromptSet, ViewLabel, ViewSet, RIG_ORDER};
use mvprompt_core::sds_nerf::{
    composite, render_rig_latent, sds_gradient_at, FieldConfig, RadianceField, RaySamples, SdsConfig, SdsGuide, Weighting,
};

type Outcome = Result<String, Box<dyn StdError>>;

fn fail<T>(msg: impl Into<String>) -> Result<T, Box<dyn StdError>> {
    Err(msg.into().into())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), Box<dyn StdError>> {
    if cond {
        Ok(())
    } else {
        fail(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), Box<dyn StdError>> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn prompt_images(variant: u64) -> Vec<ImagePrompt> {
    ViewLabel::ALL
        .iter()
        .enumerate()
        .map(|(i, l)| ImagePrompt::new(*l, ImageTensor::synthetic_object(32, variant * 4 + i as u64)).unwrap())
        .collect()
}

fn write_input(dir: &Path, name: &str, variant: u64) -> std::path::PathBuf {
    let path = dir.join(name);
    ImageTensor::synthetic_object(32, variant).save_png(&path, &[]).unwrap();
    path
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

fn n1_equivalence() -> Outcome {
    let start = Instant::now();
    let model = MultiViewModel::init(ModelConfig::default(), 0)?;
    let text = model.encoders.encode_text(RunManifest::DEFAULT_TEXT)?;
    let front = ImagePrompt::new(ViewLabel::Front, ImageTensor::synthetic_object(32, 0))?;
    let set = PromptSet::single(front.clone())?;
    let cfg = parse_controller_config("pixel(f) + local(f)")?;

    let local = build_local_context(&model.encoders, &set, &cfg)?;
    ensure(local.tokens == model.encoders.local_tokens_for(&front)?.tokens, || "local tokens differ".into())?;
    let views = initial_noise(0, (1, 4, 8, 8));
    let stacked = stack_pixel_latents(&model.encoders, &views, &set, &cfg)?;
    let z = model.encoders.pixel_latent_for(&front)?;
    ensure(stacked == stack_frames(&views, &[(ViewLabel::Front, &z)])?, || "pixel stack differs".into())?;

    let cams = model.camera.embed_rig();
    for t in [0, 37, 99] {
        let a = unet_forward(&model, &views, t, &cams, &text, &set, &cfg)?;
        let b = unet_forward_single_image(&model, &views, t, &cams, &text, &front)?;
        ensure(a == b, || format!("unet_forward differs at t = {t}"))?;
    }

    let opts = SamplerOptions { steps: 10, guidance_scale: 1.0 };
    let a = sample_multi_image(&model, &text, &set, &cfg, 32, opts, 0)?;
    let b = sample_single_image(&model, &text, &front, 32, opts, 0)?;
    ensure(a.shape() == (1, 4, 8, 8), || format!("latent shape {:?}", a.shape()))?;
    ensure(a == b, || "ddim_sample differs".into())?;

    let dir = tempfile::tempdir()?;
    let img = write_input(dir.path(), "obj.png", 0);
    let ma = RunManifest::new(Mode::Mvgen, "pixel(f) + local(f)", &img, dir.path().join("multi"), 0)?;
    let mut mb = ma.clone();
    mb.out = dir.path().join("single");
    let ra = run_mv_generation(&ma)?;
    let rb = run_single_image_baseline(&mb)?;
    ensure(ra.views == rb.views, || "pipeline views differ".into())?;
    ensure(ra.report == rb.report, || "pipeline reports differ".into())?;
    let (fa, fb) = (dir_bytes(&ma.out), dir_bytes(&mb.out));
    ensure(fa.keys().eq(fb.keys()), || "pipeline file sets differ".into())?;
    for (name, bytes) in &fa {
        if name != "manifest.json" {
            ensure(*bytes == fb[name], || format!("{name} differs"))?;
        }
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!("controllers, unet_forward, ddim_sample and {} output files bit-identical", fa.len()))
}

fn shape_contracts() -> Outcome {
    let start = Instant::now();
    let model = MultiViewModel::init(ModelConfig::default(), 0)?;
    let text = model.encoders.encode_text(RunManifest::DEFAULT_TEXT)?;
    let set = PromptSet::new(prompt_images(0))?;
    let cams = model.camera.embed_rig();
    let views = initial_noise(1, (2, 4, 8, 8));
    let configs = ControllerConfig::all_front_containing();
    for cfg in &configs {
        let n_pix = cfg.pixel_views().len();
        let n_loc = cfg.local_views().len();
        let stacked = stack_pixel_latents(&model.encoders, &views, &set, cfg)?;
        ensure(stacked.dim() == (2, 4 + n_pix, 4, 8, 8), || format!("{cfg}: stack {:?}", stacked.dim()))?;
        let cond = Conditioning::multi_image(&model, &cams, &text, &set, cfg)?;
        ensure(cond.stack_frame_count() == 4 + n_pix, || format!("{cfg}: {} frames", cond.stack_frame_count()))?;
        let local = cond.local.as_ref().expect("multi-image conditioning has local tokens");
        ensure(local.token_count() == 16 * n_loc, || format!("{cfg}: {} local tokens", local.token_count()))?;
        ensure(
            cond.context_tokens().nrows() == text.tokens.nrows() + 16 * n_loc,
            || format!("{cfg}: context rows"),
        )?;
    }
    let mut subsets = 0;
    for views in ViewSet::all_nonempty() {
        let prompts = set.select(views);
        let local = concat_local_tokens(&model.encoders, &prompts)?;
        ensure(local.token_count() == 16 * views.len(), || format!("local({}): {} tokens", views.letters(), local.token_count()))?;
        subsets += 1;
    }
    for n in 1..=4 {
        let pixel = ViewSet::from_labels(ViewLabel::ALL[..n].iter().copied());
        let cfg = ControllerConfig::new(pixel, ViewSet::single(ViewLabel::Front))?;
        let out = unet_forward(&model, &views, 50, &cams, &text, &set, &cfg)?;
        ensure(out.eps_hat.data.dim() == (2, 4, 4, 8, 8), || format!("N = {n}: output {:?}", out.eps_hat.data.dim()))?;
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!("{} (pixel, local) configs and {subsets} local subsets", configs.len()))
}

fn permutation_invariance() -> Outcome {
    let cfg = parse_controller_config("pixel(fblr) + local(fblr)")?;
    let orders: [[usize; 4]; 3] = [[0, 3, 2, 1], [0, 2, 1, 3], [0, 3, 1, 2]];
    let mut worst = 0.0f64;
    for weights_seed in 0..20u64 {
        let model = MultiViewModel::init(ModelConfig::default(), weights_seed)?;
        let text = model.encoders.encode_text("a small red chair")?;
        let cams = model.camera.embed_rig();
        let prompts = prompt_images(weights_seed);
        let base = PromptSet::new(prompts.clone())?;
        let noisy = initial_noise(100 + weights_seed, (1, 4, 8, 8));
        let t = 10 + (weights_seed as usize * 7) % 80;
        let reference = unet_forward(&model, &noisy, t, &cams, &text, &base, &cfg)?;
        let order = orders[weights_seed as usize % orders.len()];
        let permuted = PromptSet::new(order.iter().map(|&i| prompts[i].clone()).collect())?;
        let out = unet_forward(&model, &noisy, t, &cams, &text, &permuted, &cfg)?;
        worst = worst.max(out.eps_hat.max_abs_diff(&reference.eps_hat));
    }
    ensure(worst < 1e-5, || format!("max |Δε̂| = {worst:.3e}"))?;
    Ok(format!("max |Δε̂| = {worst:.3e} over 20 weight seeds"))
}

/// Textbook attention on explicit token lists: per head, scores
/// `q·k / √d_h`, max-shifted softmax, weighted sum of values, then the
/// output projection.
fn oracle_attention(attn: &Attention, queries: &[Vec<f64>], keys: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = attn.wq.ncols();
    let dh = inner / attn.heads;
    let project = |x: &[f64], w: &Array2<f64>| -> Vec<f64> { (0..w.ncols()).map(|j| (0..x.len()).map(|i| x[i] * w[[i, j]]).sum()).collect() };
    let q: Vec<_> = queries.iter().map(|x| project(x, &attn.wq)).collect();
    let k: Vec<_> = keys.iter().map(|x| project(x, &attn.wk)).collect();
    let v: Vec<_> = keys.iter().map(|x| project(x, &attn.wv)).collect();
    q.iter()
        .map(|qi| {
            let mut mixed = vec![0.0; inner];
            for h in 0..attn.heads {
                let cols = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| cols.clone().map(|d| qi[d] * kj[d]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, vj) in v.iter().enumerate() {
                    for d in cols.clone() {
                        mixed[d] += e[j] / z * vj[d];
                    }
                }
            }
            project(&mixed, &attn.wo)
        })
        .collect()
}

fn frame_tokens(x: &Array4<f64>) -> Vec<Vec<f64>> {
    let (f, c, h, w) = x.dim();
    let mut out = Vec::new();
    for fi in 0..f {
        for y in 0..h {
            for xi in 0..w {
                out.push((0..c).map(|ci| x[[fi, ci, y, xi]]).collect());
            }
        }
    }
    out
}

fn compare_frames(got: &Array4<f64>, want: &[Vec<f64>]) -> f64 {
    let flat: Vec<f64> = frame_tokens(got).into_iter().flatten().collect();
    let expect: Vec<f64> = want.iter().flatten().copied().collect();
    max_abs_diff(&flat, &expect)
}

fn attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for frames in 1..=3 {
        for (h, w) in [(1, 1), (1, 2), (2, 2)] {
            for d in 1..=4 {
                for heads in [1, 2] {
                    let inner = 2 * heads;
                    let mut init = ParamInit::new(rng.random());
                    let attn = Attention::init(&mut init, d, d, inner, d, heads);
                    let x = Array4::from_shape_simple_fn((frames, d, h, w), || StandardNormal.sample(&mut rng));
                    let tokens = frame_tokens(&x);
                    worst = worst.max(compare_frames(&dense_attention_frames(&attn, x.view())?, &oracle_attention(&attn, &tokens, &tokens)));

                    let d_ctx = 1 + rng.random_range(0..4);
                    let n_ctx = 1 + rng.random_range(0..5);
                    let cross = Attention::init(&mut init, d, d_ctx, inner, d, heads);
                    let ctx = Array2::from_shape_simple_fn((n_ctx, d_ctx), || StandardNormal.sample(&mut rng));
                    let ctx_rows: Vec<Vec<f64>> = ctx.rows().into_iter().map(|r| r.to_vec()).collect();
                    worst = worst.max(compare_frames(&cross_attention_frames(&cross, x.view(), ctx.view())?, &oracle_attention(&cross, &tokens, &ctx_rows)));
                    cases += 2;
                }
            }
        }
    }
    // the stacked wrappers always carry the four view frames; check them on
    // the smallest such stack, one prompt frame and 1×1 spatial
    let mut init = ParamInit::new(77);
    for batch in 1..=2 {
        let data = Array5::from_shape_simple_fn((batch, 5, 3, 1, 1), || StandardNormal.sample(&mut rng));
        let roles = RIG_ORDER.iter().map(|l| FrameRole::View(*l)).chain([FrameRole::Prompt(ViewLabel::Front)]).collect();
        let stacked = StackedFrames::new(data, roles)?;
        let attn = Attention::init(&mut init, 3, 3, 4, 3, 2);
        let cross = Attention::init(&mut init, 3, 2, 4, 3, 1);
        let ctx = init.matrix(3, 2, 1.0);
        let ctx_rows: Vec<Vec<f64>> = ctx.rows().into_iter().map(|r| r.to_vec()).collect();
        let dense = dense_3d_attention(&attn, &stacked)?;
        let crossed = cross_attention(&cross, &stacked, ctx.view())?;
        for b in 0..batch {
            let x = stacked.data.slice(s![b, .., .., .., ..]).to_owned();
            let tokens = frame_tokens(&x);
            worst = worst.max(compare_frames(&dense.data.slice(s![b, .., .., .., ..]).to_owned(), &oracle_attention(&attn, &tokens, &tokens)));
            worst = worst.max(compare_frames(&crossed.data.slice(s![b, .., .., .., ..]).to_owned(), &oracle_attention(&cross, &tokens, &ctx_rows)));
            cases += 2;
        }
    }
    ensure(worst < 1e-6, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("{cases} instances, max deviation {worst:.3e}"))
}

/// Returns the exact noise used to build the noisy latent it is queried at.
struct OracleNoise {
    noise: MultiViewLatent,
}

impl Denoiser for OracleNoise {
    fn predict_noise(&self, _: &MultiViewLatent, _: usize, _: &Conditioning) -> mvprompt_core::Result<DenoiserOutput> {
        Ok(DenoiserOutput { eps_hat: self.noise.clone() })
    }
}

fn sampler_identities() -> Outcome {
    let model = MultiViewModel::init(ModelConfig::default(), 0)?;
    let text = model.encoders.encode_text(RunManifest::DEFAULT_TEXT)?;
    let front = ImagePrompt::new(ViewLabel::Front, ImageTensor::synthetic_object(32, 2))?;
    let cams = model.camera.embed_rig();
    let cond = Conditioning::single_image(&model, &cams, &text, &front)?;
    let a = ddim_sample(&model.unet, &model.schedule, 10, 7, (1, 4, 8, 8), &cond)?;
    let b = ddim_sample(&model.unet, &model.schedule, 10, 7, (1, 4, 8, 8), &cond)?;
    ensure(a == b, || "DDIM output differs between identical runs".into())?;

    let schedule = NoiseSchedule::cosine(100);
    let x0 = initial_noise(11, (2, 4, 8, 8));
    let eps = initial_noise(12, (2, 4, 8, 8));
    let mut worst = 0.0f64;
    for t in 0..schedule.len() {
        let ab = schedule.alpha_bar(t);
        let x_t = (&x0.data * ab.sqrt()) + (&eps.data * (1.0 - ab).sqrt());
        let (_, x0_hat) = ddim_step(&x_t, &eps.data, ab, 1.0);
        worst = worst.max(max_abs_diff(&x0_hat, &x0.data));
    }
    let ab = schedule.alpha_bar(99);
    let start = MultiViewLatent::new((&x0.data * ab.sqrt()) + (&eps.data * (1.0 - ab).sqrt()))?;
    let oracle = OracleNoise { noise: eps.clone() };
    let one_step = ddim_sample_from(&oracle, &schedule, 1, start, &cond)?;
    let sampled = one_step.max_abs_diff(&x0);
    worst = worst.max(sampled);
    ensure(worst < 1e-12, || format!("max |x̂0 − x0| = {worst:.3e}"))?;
    Ok(format!("DDIM bit-identical; max |x̂0 − x0| = {worst:.3e} over all 100 timesteps"))
}

fn sds_gradient_checks() -> Outcome {
    let start = Instant::now();
    let model = MultiViewModel::init(ModelConfig::default(), 0)?;
    let codec = model.encoders.codec.as_ref();
    let cond = Conditioning {
        view_cams: model.camera.embed_rig(),
        text: model.encoders.encode_text(RunManifest::DEFAULT_TEXT)?,
        local: None,
        pixel: vec![],
    };
    let field = RadianceField::init(FieldConfig::default(), 5);
    ensure(field.len() <= 500, || format!("{} parameters", field.len()))?;
    let cfg = SdsConfig {
        render_size: 8,
        weighting: Weighting::OneMinusAlphaBar,
        ..SdsConfig::default()
    };
    let eps = initial_noise(21, (1, 4, 2, 2));

    let perfect = OracleNoise { noise: eps.clone() };
    let guide = SdsGuide {
        denoiser: &perfect,
        codec,
        schedule: &model.schedule,
        cond: cond.clone(),
    };
    let zero = sds_gradient_at(&field, &guide, &cfg, 50, &eps)?;
    ensure(zero.grad.iter().all(|g| *g == 0.0), || "nonzero gradient at zero residual".into())?;

    // ε̂ = ε + R with R fixed, so the residual w(t)·R does not depend on θ and
    // the SDS gradient is exactly ∇θ ⟨w(t)·R, x(θ)⟩.
    let r = initial_noise(22, (1, 4, 2, 2));
    let shifted = OracleNoise {
        noise: MultiViewLatent::new(&eps.data + &r.data)?,
    };
    let guide = SdsGuide {
        denoiser: &shifted,
        codec,
        schedule: &model.schedule,
        cond,
    };
    let t = 50;
    let w = cfg.weighting.weight(model.schedule.alpha_bar(t));
    let analytic = sds_gradient_at(&field, &guide, &cfg, t, &eps)?.grad;
    let objective = |f: &RadianceField| -> mvprompt_core::Result<f64> {
        let x = render_rig_latent(f, codec, cfg.render_size)?;
        Ok(w * x.data.iter().zip(r.data.iter()).map(|(a, b)| a * b).sum::<f64>())
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for i in 0..field.len() {
        let mut plus = field.clone();
        plus.params_mut()[i] += h;
        let mut minus = field.clone();
        minus.params_mut()[i] -= h;
        let fd = (objective(&plus)? - objective(&minus)?) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3 * scale);
        worst = worst.max(err);
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    within(start, Duration::from_secs(120))?;
    Ok(format!("zero residual gives exact zero; {} parameters, max relative error {worst:.3e}", field.len()))
}

fn renderer_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for ray in 0..1000 {
        let n = 1 + rng.random_range(0..96);
        let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..0.5)).collect();
        let sigmas: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => rng.random_range(0.0..0.1),
                2 => rng.random_range(0.0..10.0),
                _ => rng.random_range(0.0..500.0),
            })
            .collect();
        let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let positions = vec![[0.0; 3]; n];
        let c = composite(&RaySamples::new(positions, deltas, sigmas, colors)?, [1.0, 1.0, 1.0]);
        let total: f64 = c.weights.iter().sum::<f64>() + c.final_transmittance();
        worst = worst.max((total - 1.0).abs());
        ensure(c.transmittance.windows(2).all(|p| p[1] <= p[0]), || format!("ray {ray}: transmittance increases"))?;
        ensure(c.weights.iter().all(|w| *w >= 0.0), || format!("ray {ray}: negative weight"))?;
    }
    ensure(worst < 1e-6, || format!("max |Σw + T − 1| = {worst:.3e}"))?;

    let fixture = RaySamples::new(vec![[0.0; 3]; 2], vec![0.5, 0.2], vec![1.0, 2.5], vec![[0.9, 0.2, 0.1], [0.1, 0.6, 0.3]])?;
    let got = composite(&fixture, [1.0, 1.0, 1.0]).color;
    let want = [0.7458669692841914, 0.5897640403536303, 0.4788217407625363];
    let dev = max_abs_diff(&got, &want);
    ensure(dev < 1e-6, || format!("fixture {got:?} vs {want:?}"))?;
    Ok(format!("1000 rays, max |Σw + T − 1| = {worst:.3e}; fixture deviation {dev:.3e}"))
}

fn metric_oracles() -> Outcome {
    for c in [2usize, 3, 4, 7, 10, 49, 100, 1000] {
        let uniform = ClassProbabilities::new(vec![1.0 / c as f64; c])?.quality_score();
        ensure(uniform == 1.0, || format!("uniform C = {c}: {uniform}"))?;
        for hot in [0, c - 1] {
            let mut p = vec![0.0; c];
            p[hot] = 1.0;
            let q = ClassProbabilities::new(p)?.quality_score();
            ensure(q == c as f64, || format!("one-hot C = {c}: {q}"))?;
        }
    }
    let fixture = ClassProbabilities::new(vec![0.7, 0.2, 0.1])?.quality_score();
    ensure((fixture - 1.3455377349958368).abs() < 1e-9, || format!("3-class fixture {fixture}"))?;

    let suite = EvalSuite::toy(0);
    let img = ImageTensor::synthetic_object(32, 9);
    let self_score = clip_image_score(std::slice::from_ref(&img), &img, suite.image_embedder.as_ref())?.stats.mean;
    ensure(self_score == 100.0, || format!("CLIP(IM) self score {self_score}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let a: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
        let base = cosine(&a, &b)?;
        for lambda in [0.1, 1.0, 10.0] {
            let scaled: Vec<f64> = a.iter().map(|x| x * lambda).collect();
            worst = worst.max((cosine(&scaled, &b)? - base).abs());
        }
    }
    ensure(worst < 1e-12, || format!("cosine scale deviation {worst:.3e}"))?;
    Ok(format!("QIS extremes exact, fixture {fixture:.16}, CLIP(IM) self = 100, cosine scale deviation {worst:.1e}"))
}

fn cli(args: &[&str], env_out: &Path) -> Result<(), Box<dyn StdError>> {
    let out = Command::new(env!("CARGO_BIN_EXE_mvprompt")).args(args).env("MVPROMPT_OUT", env_out).output()?;
    ensure(out.status.success(), || {
        format!("mvprompt {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn mvgen_smoke() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let img = write_input(dir.path(), "toy.png", 4);
    let out = dir.path().join("run");
    let (img_s, out_s) = (img.to_str().unwrap(), out.to_str().unwrap());
    cli(&["mvgen", "--config", "pixel(f) + local(fb)", "--image", img_s, "--seed", "0", "--out", out_s], dir.path())?;
    let first = dir_bytes(&out);
    let names: Vec<&str> = first.keys().map(String::as_str).collect();
    let expected = ["grid.png", "manifest.json", "report.json", "toy_back.png", "toy_front.png", "toy_left.png", "toy_right.png"];
    ensure(names == expected, || format!("files {names:?}"))?;
    let manifest = out.join("manifest.json");
    cli(&["rerun", manifest.to_str().unwrap()], dir.path())?;
    let second = dir_bytes(&out);
    ensure(first == second, || "rerun output differs".into())?;
    within(start, Duration::from_secs(300))?;
    Ok(format!("{} files, rerun byte-identical, {:.1?}", first.len(), start.elapsed()))
}

fn gen3d_smoke() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir()?;
    let img = write_input(dir.path(), "toy.png", 6);
    let img_s = img.to_str().unwrap();
    let mut mae = Vec::new();
    for iters in ["0", "100"] {
        let out = dir.path().join(format!("it{iters}"));
        cli(
            &["gen3d", "--config", "pixel(f) + local(f)", "--image", img_s, "--seed", "0", "--iters", iters, "--mock-guidance", "--out", out.to_str().unwrap()],
            dir.path(),
        )?;
        let front = ImageTensor::load_png(&out.join("toy_front.png"))?;
        mae.push(front.mean_abs_diff(&ImageTensor::load_png(&img)?)?);
        if iters == "100" {
            let log = fs::read_to_string(out.join("optimization.csv"))?;
            ensure(log.lines().count() == 102, || format!("optimization.csv has {} lines", log.lines().count()))?;
        }
    }
    ensure(mae[1] < mae[0], || format!("front MAE {:.4} at iteration 0, {:.4} after 100", mae[0], mae[1]))?;
    within(start, Duration::from_secs(300))?;
    Ok(format!("front MAE {:.4} → {:.4}, {:.1?}", mae[0], mae[1], start.elapsed()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("n1-equivalence", n1_equivalence),
        ("shape-contracts", shape_contracts),
        ("prompt-permutation-invariance", permutation_invariance),
        ("attention-oracle", attention_oracle),
        ("sampler-identities", sampler_identities),
        ("sds-gradient", sds_gradient_checks),
        ("renderer-conservation", renderer_conservation),
        ("metric-oracles", metric_oracles),
        ("mvgen-smoke", mvgen_smoke),
        ("gen3d-smoke", gen3d_smoke),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let result = panic::catch_unwind(AssertUnwindSafe(check));
        match result {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(e)) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
            Err(p) => {
                failed += 1;
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL {name}: panicked: {msg}");
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
