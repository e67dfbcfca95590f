use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aquamvs::costvolume::{cascade_depth, CascadeSettings, SourceView};
use aquamvs::imaging::{load_dataset, read_depth, read_image, DatasetManifest};
use aquamvs::synthetic::{CameraRig, SceneSpec};
use aquamvs::training::{load_model, nearest_views, ViewData};

fn aquamvs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aquamvs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_spec() -> SceneSpec {
    SceneSpec {
        width: 48,
        height: 32,
        cameras: CameraRig {
            count: 6,
            focal: 40.0,
            ..CameraRig::default()
        },
        held_out: vec![5],
        ..SceneSpec::default()
    }
}

fn synth_small(dir: &Path) -> PathBuf {
    let spec = dir.join("scene.toml");
    fs::write(&spec, small_spec().to_toml()).unwrap();
    let data = dir.join("data");
    let out = aquamvs(&["synth", "--spec", s(&spec), "--output", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data.join("manifest.toml")
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_default_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&aquamvs(&["synth", "--output", s(&a)])), 0);
    assert_eq!(code(&aquamvs(&["synth", "--output", s(&b)])), 0);
    let manifest = DatasetManifest::load(&a.join("manifest.toml")).unwrap();
    assert_eq!(manifest.views.len(), 8);
    assert_eq!(tree(&a), tree(&b));
}

#[test]
fn synth_errors() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    fs::write(&spec, "width = 0\n").unwrap();
    let out = aquamvs(&["synth", "--spec", s(&spec), "--output", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));

    let blocker = dir.path().join("file");
    fs::write(&blocker, b"not a directory").unwrap();
    let target = blocker.join("data");
    let out = aquamvs(&["synth", "--output", s(&target)]);
    assert_eq!(code(&out), 3);
    assert!(!target.join("manifest.toml").exists());
}

#[test]
fn depth_matches_ground_truth_per_region() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&aquamvs(&["synth", "--output", s(&data)])), 0);
    let manifest = data.join("manifest.toml");
    let out_dir = dir.path().join("depth");
    let out = aquamvs(&["depth", "--manifest", s(&manifest), "--view", "2", "--output", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("median"));

    let m = DatasetManifest::load(&manifest).unwrap();
    let est = read_depth(&out_dir.join("view_02_depth.pfm")).unwrap();
    assert!(out_dir.join("view_02_sigma.pfm").is_file());
    let truth = read_depth(&manifest.parent().unwrap().join(m.views[2].depth.as_ref().unwrap())).unwrap();

    // Fine plane spacing at each pixel, from the same cascade run in-process.
    let data = load_dataset(&manifest).unwrap();
    let views: Vec<ViewData> = data.views.iter().map(|v| ViewData::from_loaded(v).unwrap()).collect();
    let target = &views[2].viewpoint;
    let srcs: Vec<SourceView> = nearest_views(&views, target, 4)
        .into_iter()
        .map(|j| SourceView {
            viewpoint: &views[j].viewpoint,
            pyramid: &views[j].pyramid,
        })
        .collect();
    let cfg = CascadeSettings::default().with_range(m.near, m.far);
    let cascade = cascade_depth(&srcs, target, &cfg).unwrap();
    let pad = cascade.padding;
    let hyp = &cascade.fine_hypotheses;

    // Regions split at the middle of the visible depth range.
    let covered: Vec<f32> = truth.iter().copied().filter(|&z| z > 0.0).collect();
    let lo = covered.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = covered.iter().copied().fold(0.0, f32::max);
    let mid = 0.5 * (lo + hi);
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    for near_region in [true, false] {
        let (mut gt, mut es, mut sp) = (Vec::new(), Vec::new(), Vec::new());
        for ((y, x), &z) in truth.indexed_iter() {
            if !(z > 0.0 && (z < mid) == near_region) {
                continue;
            }
            assert_eq!(est[[y, x]], cascade.full.depth[[y, x]] as f32);
            gt.push(z as f64);
            es.push(est[[y, x]] as f64);
            let (xf, yf) = (((x + pad.left) / 2).min(hyp.width() - 1), ((y + pad.top) / 2).min(hyp.height() - 1));
            sp.push(hyp.spacing_at(yf, xf, z as f64));
        }
        assert!(gt.len() > 100);
        let (g, e, spacing) = (median(gt), median(es), median(sp));
        assert!((g - e).abs() <= spacing, "region near={near_region}: median {e} vs truth {g}, spacing {spacing}");
    }
}

#[test]
fn depth_records_plane_counts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path());
    let read_cfg = |d: &Path| fs::read_to_string(d.join("run.toml")).unwrap();

    let a = dir.path().join("a");
    assert_eq!(code(&aquamvs(&["depth", "--manifest", s(&manifest), "--view", "0", "--output", s(&a)])), 0);
    let text = read_cfg(&a);
    assert!(text.contains("coarse_planes = 16") && text.contains("fine_planes = 8"), "{text}");

    let b = dir.path().join("b");
    let args = ["depth", "--manifest", s(&manifest), "--view", "0", "--output", s(&b), "--planes", "12,6"];
    assert_eq!(code(&aquamvs(&args)), 0);
    let text = read_cfg(&b);
    assert!(text.contains("coarse_planes = 12") && text.contains("fine_planes = 6"), "{text}");

    let out = aquamvs(&["depth", "--manifest", s(&manifest), "--view", "6", "--output", s(&b)]);
    assert_eq!(code(&out), 2);
    let out = aquamvs(&["depth", "--manifest", s(&manifest), "--view", "0", "--output", s(&b), "--planes", "16"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_render_restore_eval() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path());
    let run = |name: &str| {
        let out_dir = dir.path().join(name);
        let out = aquamvs(&[
            "--threads", "1", "train", "--manifest", s(&manifest), "--output", s(&out_dir), "--iterations", "8",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(b.join("loss.csv")).unwrap());
    let (ma, pa) = load_model(&a.join("model.ckpt")).unwrap();
    let (mb, pb) = load_model(&b.join("model.ckpt")).unwrap();
    assert_eq!((ma, pa), (mb, pb));
    let loss = fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 9);
    assert!(fs::read_to_string(a.join("command.txt")).unwrap().contains("seed = 0"));

    // Rerunning from the recorded config reproduces the run.
    let c = dir.path().join("c");
    let out = aquamvs(&["--threads", "1", "train", "--config", s(&a.join("run.toml")), "--output", s(&c)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(c.join("loss.csv")).unwrap());

    let ckpt = a.join("model.ckpt");
    let renders = dir.path().join("renders");
    let out = aquamvs(&[
        "render", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--output", s(&renders), "--view", "5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let img = read_image(&renders.join("view_05_image.png")).unwrap();
    let att = read_image(&renders.join("view_05_attenuated.png")).unwrap();
    let bs = read_image(&renders.join("view_05_backscatter.png")).unwrap();
    for ((i, a), b) in img.view().iter().zip(att.view()).zip(bs.view()) {
        if *i < 1.0 {
            assert!((i - (a + b)).abs() <= 1.5 / 65535.0);
        }
    }
    assert!(read_depth(&renders.join("view_05_depth.pfm")).is_ok());

    let out = aquamvs(&[
        "restore", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--output", s(&renders), "--view", "1",
    ]);
    assert_eq!(code(&out), 0);
    let csv = dir.path().join("eval.csv");
    let out = aquamvs(&[
        "eval", "--manifest", s(&manifest), "--renders", s(&renders), "--kind", "restored", "--output", s(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "view,psnr,ssim");
    assert!(lines[1].starts_with("view_01,"));
    assert!(lines[2].starts_with("mean,"));
}

#[test]
fn eval_identical_images_gives_sentinels() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path());
    let out = aquamvs(&["eval", "--manifest", s(&manifest), "--renders", s(manifest.parent().unwrap()), "--kind", "clear"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    for r in rows {
        assert!(r.ends_with(",inf,1.0"), "{r}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_small(dir.path());
    let out_dir = dir.path().join("t");

    assert_eq!(code(&aquamvs(&["train", "--bogus"])), 2);
    let out = aquamvs(&["train", "--manifest", s(&dir.path().join("missing.toml")), "--output", s(&out_dir)]);
    assert_eq!(code(&out), 2);
    let out = aquamvs(&["render", "--manifest", s(&manifest), "--checkpoint", s(&dir.path().join("none.ckpt")), "--output", s(&out_dir)]);
    assert_eq!(code(&out), 3);

    let cfg = dir.path().join("explode.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 1e30\nfinal_learning_rate = 1e30\n").unwrap();
    let out = aquamvs(&[
        "train", "--config", s(&cfg), "--manifest", s(&manifest), "--output", s(&out_dir), "--iterations", "10",
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}
