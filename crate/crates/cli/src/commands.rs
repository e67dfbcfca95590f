use std::fs;
use std::path::{Path, PathBuf};

use aquamvs::imaging::{
    central_crop_eval_region, load_dataset, psnr, read_image, ssim, write_depth, write_image, Dataset, ImageBuffer,
    PngEncoding,
};
use aquamvs::synthetic::{generate_dataset, SceneSpec};
use aquamvs::training::{
    load_model, nearest_views, render_novel_view, restore_view, save_model, target_geometry, train_scene,
    write_loss_csv, Model, ViewData,
};
use aquamvs::{Error, Result};
use ndarray::{Array2, Array3};

use crate::config::{RunConfig, RUN_RECORD};
use crate::{Cli, Command, EvalKind, RunArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const COMMAND_RECORD: &str = "command.txt";

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { spec, output, seed } => synth(spec.as_deref(), output, *seed),
        Command::Depth { run, view } => depth(cli, run, *view),
        Command::Train {
            run,
            iterations,
            ablate,
        } => train(cli, run, *iterations, *ablate),
        Command::Render { run, checkpoint, view } => render(cli, run, checkpoint, *view),
        Command::Restore {
            run,
            checkpoint,
            view,
            image,
        } => restore(cli, run, checkpoint, *view, image.as_deref()),
        Command::Eval {
            manifest,
            renders,
            kind,
            output,
        } => eval(manifest, renders, *kind, output.as_deref()),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Merge the config file (if any) with command-line overrides.
fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(o) = &args.output {
        cfg.output = Some(o.clone());
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some((coarse, fine)) = args.planes {
        cfg.cascade.coarse_planes = coarse;
        cfg.cascade.fine_planes = fine;
    }
    Ok(cfg)
}

/// Write the resolved config and the invocation into `dir`.
fn record(cli: &Cli, cfg: &RunConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let path = dir.join(RUN_RECORD);
    fs::write(&path, cfg.to_toml()).map_err(|e| io_err(&path, e))?;
    let argv: Vec<String> = std::env::args().collect();
    let text = format!(
        "{}\nthreads = {}\nseed = {}\n",
        argv.join(" "),
        cli.threads.map_or_else(|| "default".to_string(), |n| n.to_string()),
        cfg.seed
    );
    let path = dir.join(COMMAND_RECORD);
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn synth(spec_path: Option<&Path>, output: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec_path {
        Some(p) => SceneSpec::load(p)?,
        None => SceneSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = generate_dataset(&spec, output)?;
    println!(
        "wrote {} views to {} (depth range {:.3}..{:.3})",
        ds.views.len(),
        ds.manifest_path.display(),
        ds.manifest.near,
        ds.manifest.far
    );
    Ok(())
}

struct Loaded {
    dataset: Dataset,
    views: Vec<ViewData>,
}

fn load(cfg: &RunConfig) -> Result<Loaded> {
    let dataset = load_dataset(cfg.manifest()?)?;
    let views = dataset
        .views
        .iter()
        .map(ViewData::from_loaded)
        .collect::<Result<Vec<_>>>()?;
    Ok(Loaded { dataset, views })
}

fn check_index(view: usize, count: usize) -> Result<()> {
    if view >= count {
        return Err(Error::Config(format!("view index {view} out of range (dataset has {count} views)")));
    }
    Ok(())
}

fn depth(cli: &Cli, args: &RunArgs, view: usize) -> Result<()> {
    let cfg = resolve(args)?;
    cfg.validate()?;
    let out = cfg.output()?.to_path_buf();
    let data = load(&cfg)?;
    check_index(view, data.views.len())?;
    let target = &data.views[view].viewpoint;
    let idx = nearest_views(&data.views, target, cfg.train.inference_views);
    if idx.len() < 2 {
        return Err(Error::Domain(format!(
            "depth needs at least 2 source views besides the target, found {}",
            idx.len()
        )));
    }
    let sources: Vec<&ViewData> = idx.iter().map(|&i| &data.views[i]).collect();
    let m = &data.dataset.manifest;
    let geom = target_geometry(&sources, target, &cfg.cascade.with_range(m.near, m.far))?;
    record(cli, &cfg, &out)?;

    let d = &geom.depth;
    let masked = |a: &Array2<f64>| Array2::from_shape_fn(a.dim(), |(y, x)| if d.valid[[y, x]] { a[[y, x]] as f32 } else { 0.0 });
    let name = &data.dataset.views[view].name;
    write_depth(&out.join(format!("{name}_depth.pfm")), &masked(&d.depth))?;
    write_depth(&out.join(format!("{name}_sigma.pfm")), &masked(&d.sigma))?;

    let mut valid: Vec<f64> = d.depth.iter().zip(&d.valid).filter(|(_, &v)| v).map(|(&z, _)| z).collect();
    if valid.is_empty() {
        println!("no valid depth pixels");
        return Ok(());
    }
    valid.sort_by(f64::total_cmp);
    let n = valid.len();
    let median = if n % 2 == 1 { valid[n / 2] } else { 0.5 * (valid[n / 2 - 1] + valid[n / 2]) };
    println!(
        "view {name}: {n}/{} valid, depth min {:.4} max {:.4} median {:.4} (planes {},{})",
        d.depth.len(),
        valid[0],
        valid[n - 1],
        median,
        cfg.cascade.coarse_planes,
        cfg.cascade.fine_planes
    );
    Ok(())
}

fn train(cli: &Cli, args: &RunArgs, iterations: Option<usize>, ablate: bool) -> Result<()> {
    let mut cfg = resolve(args)?;
    if let Some(n) = iterations {
        cfg.train.iterations = n;
    }
    cfg.medium.ablate |= ablate;
    cfg.validate()?;
    let out = cfg.output()?.to_path_buf();
    let dataset = load_dataset(cfg.manifest()?)?;
    record(cli, &cfg, &out)?;
    let result = train_scene(&dataset, &cfg.train_config(), &cfg.loss)?;
    write_loss_csv(&out.join(LOSS_FILE), &result.trace)?;
    save_model(&out.join(CHECKPOINT_FILE), &result.model.settings, &result.params, Some(&cfg))?;
    let first = result.trace.first().map_or(f64::NAN, |r| r.total);
    let last = result.trace.last().map_or(f64::NAN, |r| r.total);
    println!(
        "trained {} iterations: loss {first:.5} -> {last:.5}; checkpoint {}",
        result.trace.len(),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

/// Sources for a target: nearest training views (held-out views never serve).
fn sources_for<'a>(data: &'a Loaded, model: &Model, view: usize) -> Result<Vec<&'a ViewData>> {
    let train_idx = data.dataset.training_indices();
    let train: Vec<ViewData> = train_idx.iter().map(|&i| data.views[i].clone()).collect();
    let picked = nearest_views(&train, &data.views[view].viewpoint, model.settings.inference_views);
    if picked.len() < 2 {
        return Err(Error::Domain(format!(
            "view {view} has {} usable source views, need at least 2",
            picked.len()
        )));
    }
    Ok(picked.into_iter().map(|j| &data.views[train_idx[j]]).collect())
}

fn targets(view: Option<usize>, count: usize) -> Result<Vec<usize>> {
    match view {
        Some(v) => {
            check_index(v, count)?;
            Ok(vec![v])
        }
        None => Ok((0..count).collect()),
    }
}

fn write_png(path: PathBuf, data: Array3<f32>) -> Result<()> {
    write_image(&path, &ImageBuffer::new(data)?, PngEncoding::Linear16)
}

/// Load the checkpoint and use its stored model settings; the config only
/// supplies paths, since inference must match what was trained.
fn load_for_inference(args: &RunArgs, checkpoint: &Path) -> Result<(RunConfig, Model)> {
    let mut cfg = resolve(args)?;
    let (model, _) = load_model(checkpoint)?;
    cfg.cascade = model.settings.cascade;
    cfg.medium.sh_level = model.settings.sh_level;
    cfg.medium.exponent = model.settings.exponent;
    cfg.medium.ablate = model.settings.ablate_medium;
    cfg.train.inference_views = model.settings.inference_views;
    cfg.validate()?;
    Ok((cfg, model))
}

fn render(cli: &Cli, args: &RunArgs, checkpoint: &Path, view: Option<usize>) -> Result<()> {
    let (cfg, model) = load_for_inference(args, checkpoint)?;
    let out = cfg.output()?.to_path_buf();
    let data = load(&cfg)?;
    let todo = targets(view, data.views.len())?;
    record(cli, &cfg, &out)?;
    let m = &data.dataset.manifest;
    for i in todo {
        let sources = sources_for(&data, &model, i)?;
        let nv = render_novel_view(&model, &sources, &data.views[i].viewpoint, m.near, m.far)?;
        let name = &data.dataset.views[i].name;
        write_png(out.join(format!("{name}_image.png")), nv.image)?;
        write_png(out.join(format!("{name}_clear.png")), nv.clear.mapv(|v| v.clamp(0.0, 1.0)))?;
        write_png(out.join(format!("{name}_attenuated.png")), nv.attenuated)?;
        write_png(out.join(format!("{name}_backscatter.png")), nv.backscatter)?;
        let d = &nv.depth;
        let depth = Array2::from_shape_fn(d.depth.dim(), |(y, x)| if d.valid[[y, x]] { d.depth[[y, x]] as f32 } else { 0.0 });
        write_depth(&out.join(format!("{name}_depth.pfm")), &depth)?;
        println!("rendered {name}");
    }
    Ok(())
}

fn restore(cli: &Cli, args: &RunArgs, checkpoint: &Path, view: Option<usize>, image: Option<&Path>) -> Result<()> {
    let (cfg, model) = load_for_inference(args, checkpoint)?;
    let out = cfg.output()?.to_path_buf();
    let data = load(&cfg)?;
    let todo = targets(view, data.views.len())?;
    let override_image = image.map(read_image).transpose()?;
    record(cli, &cfg, &out)?;
    let m = &data.dataset.manifest;
    for i in todo {
        let sources = sources_for(&data, &model, i)?;
        let observed = override_image.as_ref().unwrap_or(&data.dataset.views[i].image);
        let rv = restore_view(&model, &sources, &data.views[i].viewpoint, observed.view(), m.near, m.far)?;
        let name = &data.dataset.views[i].name;
        write_png(out.join(format!("{name}_restored.png")), rv.clear)?;
        if rv.ill_conditioned > 0 {
            log::warn!("{name}: {} pixels with transmission below the floor", rv.ill_conditioned);
        }
        println!("restored {name}");
    }
    Ok(())
}

/// One CSV row; infinite PSNR (identical images) prints as `inf`.
#[derive(Debug, serde::Serialize)]
struct EvalRow {
    view: String,
    psnr: f64,
    ssim: f64,
}

fn eval(manifest: &Path, renders: &Path, kind: EvalKind, output: Option<&Path>) -> Result<()> {
    let data = load_dataset(manifest)?;
    let suffix = match kind {
        EvalKind::Image => "image",
        EvalKind::Clear => "clear",
        EvalKind::Restored => "restored",
    };
    let mut rows = Vec::new();
    for v in &data.views {
        let path = renders.join(format!("{}_{suffix}.png", v.name));
        if !path.is_file() {
            log::warn!("no render for view {} at {}", v.name, path.display());
            continue;
        }
        let truth = match kind {
            EvalKind::Image => &v.image,
            EvalKind::Clear | EvalKind::Restored => v
                .clear
                .as_ref()
                .ok_or_else(|| Error::Config(format!("view {} has no ground-truth clear image", v.name)))?,
        };
        let pred = read_image(&path)?;
        let (p, t) = (central_crop_eval_region(&pred)?, central_crop_eval_region(truth)?);
        rows.push(EvalRow {
            view: v.name.clone(),
            psnr: psnr(&p, &t, 1.0)?,
            ssim: ssim(&p, &t)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("no `*_{suffix}.png` renders found in {}", renders.display())));
    }
    let n = rows.len() as f64;
    let mean = EvalRow {
        view: "mean".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    };
    rows.push(mean);

    let csv_err = |path: &Path, e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => io_err(path, e),
        other => Error::Config(format!("{other:?}")),
    };
    match output {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
            for r in &rows {
                w.serialize(r).map_err(|e| csv_err(path, e))?;
            }
            w.flush().map_err(|e| io_err(path, e))?;
        }
        None => {
            let mut w = csv::Writer::from_writer(std::io::stdout());
            for r in &rows {
                w.serialize(r).map_err(|e| csv_err(Path::new("<stdout>"), e))?;
            }
            w.flush().map_err(|e| io_err(Path::new("<stdout>"), e))?;
        }
    }
    Ok(())
}
