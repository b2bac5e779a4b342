use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mvprompt_core::image::ImageTensor;
use mvprompt_core::metrics::MetricReport;
use mvprompt_core::pipeline::RunManifest;

fn mvprompt(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvprompt"))
        .args(args)
        .env("MVPROMPT_OUT", root)
        .output()
        .unwrap()
}

fn input(dir: &Path, name: &str, variant: u64) -> String {
    let p = dir.join(name);
    ImageTensor::synthetic_object(32, variant).save_png(&p, &[]).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn bad_config_exits_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let img = input(dir.path(), "a.png", 0);
    let out = mvprompt(&["mvgen", "--config", "pixel(b) + local(f)", "--image", &img], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn default_output_directory_uses_the_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let img = input(dir.path(), "mug.png", 1);
    let out = mvprompt(&["mvgen", "--config", "pixel(f)+local(f)", "--image", &img, "--seed", "3", "--steps", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("mug_mvgen_s3");
    let m = RunManifest::load(&run.join("manifest.json")).unwrap();
    assert_eq!(m.config, "pixel(f) + local(f)");
    assert_eq!(m.steps, 2);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("pixel(f) + local(f)"), "{stdout}");
}

#[test]
fn eval_scores_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let prompt = input(dir.path(), "prompt.png", 2);
    let images = dir.path().join("imgs");
    fs::create_dir(&images).unwrap();
    for v in 0..3 {
        input(&images, &format!("{v}.png"), v);
    }
    let out_dir = dir.path().join("eval");
    let out = mvprompt(
        &["eval", "--config", "pixel(f)+local(f)", "--image", &prompt, "--images", images.to_str().unwrap(), "--out", out_dir.to_str().unwrap()],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = MetricReport::from_json(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.n_images, 3);
    assert_eq!(report.resized, Some(0));
}

#[test]
fn checkpoint_from_init_weights_reproduces_the_seeded_model() {
    let dir = tempfile::tempdir().unwrap();
    let img = input(dir.path(), "cup.png", 3);
    let ckpt = dir.path().join("w.json");
    assert!(mvprompt(&["init-weights", "--weights-seed", "4", "--out", ckpt.to_str().unwrap()], dir.path()).status.success());
    let seeded = dir.path().join("seeded");
    let loaded = dir.path().join("loaded");
    let common = ["mvgen", "--config", "pixel(f)+local(f)", "--image", &img, "--steps", "2"];
    let a = mvprompt(&[&common[..], &["--weights-seed", "4", "--out", seeded.to_str().unwrap()]].concat(), dir.path());
    let b = mvprompt(&[&common[..], &["--checkpoint", ckpt.to_str().unwrap(), "--out", loaded.to_str().unwrap()]].concat(), dir.path());
    assert!(a.status.success() && b.status.success());
    assert_eq!(fs::read(seeded.join("grid.png")).unwrap(), fs::read(loaded.join("grid.png")).unwrap());
}

#[test]
fn key_value_run_file_matches_the_equivalent_flags() {
    let dir = tempfile::tempdir().unwrap();
    let img = input(dir.path(), "pot.png", 5);
    let from_file = dir.path().join("from_file");
    let from_flags = dir.path().join("from_flags");
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!("mode = mvgen\nseed = 2\nlatent_size = 8\nsteps = 3\nconfig = pixel(f) + local(fb)\nimage = {img}\nout = {}\n", from_file.display()),
    )
    .unwrap();
    assert!(mvprompt(&["run", cfg.to_str().unwrap()], dir.path()).status.success());
    let flags = ["mvgen", "--config", "pixel(f)+local(fb)", "--image", &img, "--seed", "2", "--steps", "3", "--out", from_flags.to_str().unwrap()];
    assert!(mvprompt(&flags, dir.path()).status.success());
    for f in ["grid.png", "report.json", "pot_back.png"] {
        assert_eq!(fs::read(from_file.join(f)).unwrap(), fs::read(from_flags.join(f)).unwrap(), "{f}");
    }
}
