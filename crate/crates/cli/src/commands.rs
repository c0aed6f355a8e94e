//! Subcommand implementations. Each returns a human-readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use facegraph::data::container::load_container;
use facegraph::data::synthetic::write_synthetic_set;
use facegraph::data::{
    denormalize, list_images, load_aligned, load_rgb, normalize, save_image, split_counts, write_atomic, DatasetManifest,
    Split, ALIGNED_SIZE, CROP_SIZE,
};
use facegraph::degrade::degrade_item;
use facegraph::metrics::evaluate_pairs;
use facegraph::trainer::{center_crop, checkpoint_config, evaluate, load_generator, restore, run_ablation, Trainer};
use facegraph::Tensor;

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, Result};
use crate::suite::gradient_suite;

/// Manifest file looked up in `--data` directories.
pub const MANIFEST_FILE: &str = "manifest.txt";

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Write `lq` images and their masks for every 128×128 image in `--data`.
pub fn degrade(flags: &Overrides) -> Result<String> {
    let rc = RunConfig::resolve("degrade", flags, None)?;
    let data = rc.data()?;
    let out = rc.prepare_out()?;
    let spec = rc.train.degradation(rc.train.seed)?;
    let mut report = String::new();
    let mut csv = String::from("filename,top,left,side\n");
    let mut done = 0;
    for path in list_images(data)? {
        let name = file_name(&path);
        let img = match load_rgb(&path) {
            Ok(img) if img.dim(1) == CROP_SIZE && img.dim(2) == CROP_SIZE => img,
            Ok(img) => {
                let _ = writeln!(report, "skipped {name}: {}x{} is not 128x128", img.dim(2), img.dim(1));
                continue;
            }
            Err(e) => {
                let _ = writeln!(report, "skipped {name}: {e}");
                continue;
            }
        };
        let (lq, mask) = degrade_item(&normalize::<f64>(&img), &spec, done)?;
        save_image(&out.join(&name), &denormalize(&lq))?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        save_image(&out.join("masks").join(format!("{stem}.png")), &mask.to_image())?;
        let _ = writeln!(csv, "{name},{},{},{}", mask.top, mask.left, mask.side);
        done += 1;
    }
    if done == 0 {
        return Err(CliError::Validation(format!("no 128x128 images in {}\n{report}", data.display())));
    }
    write_atomic(&out.join("masks.csv"), csv.as_bytes())?;
    let _ = writeln!(
        report,
        "degraded {done} images (scale {}, mask fraction {}) into {}",
        spec.scale,
        spec.mask_fraction,
        out.display()
    );
    Ok(report)
}

/// Files of `split` when the directory has a manifest, otherwise every image.
fn dataset_files(dir: &Path, split: Split) -> Result<Vec<(String, PathBuf)>> {
    let manifest = dir.join(MANIFEST_FILE);
    if manifest.is_file() {
        return Ok(DatasetManifest::load(&manifest)?.files(split));
    }
    Ok(list_images(dir)?.into_iter().map(|p| (file_name(&p), p)).collect())
}

/// 144×144 and 128×128 images load as-is; other sizes are resized to 144.
fn load_training_image(path: &Path) -> Result<Tensor<u8>> {
    let img = load_rgb(path)?;
    if img.dim(1) == img.dim(2) && (img.dim(1) == ALIGNED_SIZE || img.dim(1) == CROP_SIZE) {
        return Ok(img);
    }
    Ok(load_aligned(path)?)
}

fn load_set(files: &[(String, PathBuf)]) -> Result<Vec<(String, Tensor<u8>)>> {
    files.iter().map(|(n, p)| Ok((n.clone(), load_training_image(p)?))).collect()
}

/// Train from scratch, or continue from `--checkpoint`.
pub fn train(flags: &Overrides) -> Result<String> {
    let entries = match &flags.checkpoint {
        Some(path) => Some(load_container(path)?),
        None => None,
    };
    let base = entries.as_deref().map(checkpoint_config).transpose()?;
    let rc = RunConfig::resolve("train", flags, base)?;
    let files = dataset_files(rc.data()?, Split::Train)?;
    if files.is_empty() {
        return Err(CliError::Validation(format!("no training images in {}", rc.data()?.display())));
    }
    let images: Vec<Tensor<u8>> = load_set(&files)?.into_iter().map(|(_, t)| t).collect();
    let out = rc.prepare_out()?;
    let mut trainer = match &entries {
        Some(e) => Trainer::<f32>::resume_with(rc.train.clone(), e, images)?,
        None => Trainer::<f32>::new(rc.train.clone(), images)?,
    };
    let start = trainer.step;
    trainer.train(Some(out))?;
    let mut report = format!("trained steps {}..{} on {} images into {}\n", start, trainer.step, files.len(), out.display());
    if let Some(last) = trainer.history.last() {
        let _ = writeln!(
            report,
            "final losses: pixel {:.5} perceptual {:.5} adv_G {:.5} D {:.5} total {:.5}",
            last.pixel, last.perceptual, last.adversarial_g, last.discriminator, last.total
        );
    }
    Ok(report)
}

/// Nearest-neighbour upscale of a `[3, s, s]` image to `size`.
pub fn nearest_upscale(img: &Tensor<u8>, size: usize) -> Tensor<u8> {
    let (c, s) = (img.dim(0), img.dim(1));
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for r in 0..size {
            for col in 0..size {
                data.push(img.data()[(ch * s + r * s / size) * s + col * s / size]);
            }
        }
    }
    Tensor::from_vec([c, size, size], data).expect("c*size*size")
}

const GUTTER: usize = 2;

/// Rows of equally sized `[3, t, t]` tiles on a white background.
pub fn grid(rows: &[Vec<Tensor<u8>>]) -> Result<Tensor<u8>> {
    let t = rows
        .first()
        .and_then(|r| r.first())
        .map(|x| x.dim(1))
        .ok_or_else(|| CliError::Validation("empty grid".into()))?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (h, w) = (rows.len() * (t + GUTTER) + GUTTER, cols * (t + GUTTER) + GUTTER);
    let mut data = vec![255u8; 3 * h * w];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, tile) in row.iter().enumerate() {
            if tile.shape() != [3, t, t] {
                return Err(CliError::Validation(format!("grid tile {ri},{ci} has shape {:?}, expected [3,{t},{t}]", tile.shape())));
            }
            let (y0, x0) = (GUTTER + ri * (t + GUTTER), GUTTER + ci * (t + GUTTER));
            for c in 0..3 {
                for y in 0..t {
                    let src = &tile.data()[(c * t + y) * t..(c * t + y + 1) * t];
                    let dst = (c * h + y0 + y) * w + x0;
                    data[dst..dst + t].copy_from_slice(src);
                }
            }
        }
    }
    Ok(Tensor::from_vec([3, h, w], data)?)
}

/// Restore every degraded image in `--data`; with `gt`, also write `grids/comparison.png`
/// (ground truth / nearest-upscaled input / output).
pub fn restore_dir(flags: &Overrides, gt: Option<&Path>) -> Result<String> {
    let rc = RunConfig::resolve("restore", flags, None)?;
    let ck = rc.checkpoint()?;
    let gen = load_generator::<f32>(ck)?;
    let s = gen.cfg.input_size;
    let mut inputs = Vec::new();
    for path in list_images(rc.data()?)? {
        let img = load_rgb(&path)?;
        if img.shape() != [3, s, s] {
            return Err(CliError::Validation(format!(
                "{}: {}x{} input, checkpoint expects {s}x{s}",
                path.display(),
                img.dim(2),
                img.dim(1)
            )));
        }
        inputs.push((file_name(&path), img));
    }
    if inputs.is_empty() {
        return Err(CliError::Validation(format!("no images in {}", rc.data()?.display())));
    }
    let out = rc.prepare_out()?;
    let mut rows = [Vec::new(), Vec::new(), Vec::new()];
    for (name, lq) in &inputs {
        let x = normalize::<f32>(lq).reshape([1, 3, s, s])?;
        let y = denormalize(&restore(&gen, &x)?.index_outer(0));
        save_image(&out.join(name), &y)?;
        if let Some(dir) = gt {
            let path = dir.join(name);
            let g = center_crop(&load_rgb(&path)?).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            rows[0].push(g);
            rows[1].push(nearest_upscale(lq, CROP_SIZE));
            rows[2].push(y);
        }
    }
    if gt.is_some() {
        save_image(&out.join("grids").join("comparison.png"), &grid(&rows)?)?;
    }
    Ok(format!("restored {} images into {}\n", inputs.len(), out.display()))
}

/// Score restored images against ground truth, or a checkpoint on fixed
/// degradations of the ground truth.
pub fn eval(flags: &Overrides, restored: Option<&Path>) -> Result<String> {
    let rc = RunConfig::resolve("eval", flags, None)?;
    let gt = rc.data()?.to_path_buf();
    match (restored, &rc.checkpoint) {
        (Some(dir), None) => {
            let out = rc.prepare_out()?;
            let report = evaluate_pairs(dir, &gt)?;
            report.save_csv(&out.join("metrics.csv"))?;
            Ok(report.table())
        }
        (None, Some(ck)) => {
            let entries = load_container(ck)?;
            let cfg = checkpoint_config(&entries)?;
            let gen = load_generator::<f32>(ck)?;
            let images = load_set(&dataset_files(&gt, Split::Test)?)?;
            if images.is_empty() {
                return Err(CliError::Validation(format!("no evaluation images in {}", gt.display())));
            }
            let out = rc.prepare_out()?;
            let spec = cfg.degradation(rc.train.seed)?;
            let ev = evaluate(&gen, &images, &spec)?;
            ev.model.save_csv(&out.join("metrics.csv"))?;
            ev.baseline.save_csv(&out.join("baseline.csv"))?;
            Ok(format!("model\n{}\nbicubic baseline\n{}", ev.model.table(), ev.baseline.table()))
        }
        _ => Err(CliError::Validation("eval: give exactly one of --restored or --checkpoint".into())),
    }
}

/// Run the gradient suite; fails naming the first failing component and parameter.
pub fn gradcheck(flags: &Overrides) -> Result<String> {
    let rc = RunConfig::resolve("gradcheck", flags, None)?;
    let out = if rc.out.is_some() { Some(rc.prepare_out()?) } else { None };
    let mut text = String::new();
    let mut csv = String::from("component,parameter,elements,max_rel_err,passed\n");
    let mut failure = None;
    for (component, result) in gradient_suite() {
        let report = result?;
        let _ = writeln!(text, "[{component}]\n{report}");
        for p in &report.params {
            let ok = p.max_rel_err <= report.tol;
            let _ = writeln!(csv, "{component},{},{},{:e},{ok}", p.name, p.elements, p.max_rel_err);
        }
        if failure.is_none() {
            if let Some(p) = report.first_failure() {
                failure = Some(format!("{component}: {} max_rel_err {:.3e} > {:.1e}", p.name, p.max_rel_err, report.tol));
            }
        }
    }
    if let Some(dir) = out {
        write_atomic(&dir.join("gradcheck.csv"), csv.as_bytes())?;
    }
    match failure {
        Some(f) => Err(CliError::Validation(format!("{text}gradient check failed: {f}"))),
        None => Ok(text),
    }
}

/// Train M1/M2/M3 with the same seed and budget and tabulate held-out metrics.
pub fn ablate(flags: &Overrides) -> Result<String> {
    let rc = RunConfig::resolve("ablate", flags, None)?;
    let data = rc.data()?;
    let (train_files, eval_files) = if data.join(MANIFEST_FILE).is_file() {
        (dataset_files(data, Split::Train)?, dataset_files(data, Split::Test)?)
    } else {
        let all = dataset_files(data, Split::Train)?;
        let (n_train, _, n_test) = split_counts(all.len());
        (all[..n_train].to_vec(), all[all.len() - n_test..].to_vec())
    };
    if train_files.is_empty() || eval_files.is_empty() {
        return Err(CliError::Validation(format!("{}: too few images to split into train and test", data.display())));
    }
    let train: Vec<Tensor<u8>> = load_set(&train_files)?.into_iter().map(|(_, t)| t).collect();
    let eval = load_set(&eval_files)?;
    let out = rc.prepare_out()?;
    let table = run_ablation::<f32>(&train, &eval, &rc.train);
    write_atomic(&out.join("ablation.csv"), table.to_csv().as_bytes())?;
    let text = table.table();
    if let Some(bad) = table.rows.iter().find(|r| r.result.is_err()) {
        let msg = bad.result.as_ref().err().cloned().unwrap_or_default();
        return Err(CliError::Runtime(format!("{text}variant {} failed: {msg}", bad.variant.name())));
    }
    Ok(text)
}

/// Write `count` synthetic faces for desk-scale runs.
pub fn synth(flags: &Overrides, count: usize, size: usize) -> Result<String> {
    let rc = RunConfig::resolve("synth", flags, None)?;
    if count == 0 || size < CROP_SIZE {
        return Err(CliError::Validation(format!("synth: need count ≥ 1 and size ≥ {CROP_SIZE}")));
    }
    let out = rc.prepare_out()?;
    let files = write_synthetic_set(out, count, rc.train.seed, size)?;
    Ok(format!("wrote {} synthetic faces into {}\n", files.len(), out.display()))
}
