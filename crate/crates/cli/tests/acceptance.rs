//! Acceptance suite: one PASS/FAIL line per criterion, then a single verdict.
//!
//! Run alone with `cargo test -p facegraph-cli --test acceptance -- --nocapture`.
//! The lines go straight to stderr so they show even when output is captured.

#[path = "../../core/tests/common/oracles.rs"]
mod oracles;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use facegraph::backend::Graph;
use facegraph::data::container::{decode, encode, load_container};
use facegraph::data::synthetic::synthetic_face;
use facegraph::data::{load_rgb, normalize};
use facegraph::degrade::{degrade_item, DegradationSpec};
use facegraph::metrics::{image_pair_metrics, psnr, ssim};
use facegraph::networks::{Ablation, Discriminator, Generator};
use facegraph::patchgraph::{build_adjacency, igcn_layer, normalize_adjacency, AdjacencyScheme, IgcnMode};
use facegraph::trainer::{evaluate, run_ablation, Task, TrainConfig, Trainer};
use facegraph::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn bin(args: &[&str], cwd: &Path) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_facegraph")).args(args).current_dir(cwd).output().map_err(|e| e.to_string())?;
    ensure!(o.status.success(), "`facegraph {}` exited {:?}: {}", args.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr));
    Ok(())
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn igcn_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        for k in [1usize, 2, 8] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::uniform([2, 3, 32, 32], -1.0, 1.0, &mut rng);
            let w = Tensor::<f64>::uniform([4, 3, 3, 3], -0.5, 0.5, &mut rng);
            let b = Tensor::<f64>::uniform([4], -0.1, 0.1, &mut rng);
            let adj = normalize_adjacency(&build_adjacency(k, &AdjacencyScheme::default_for(k)).map_err(|e| e.to_string())?);
            let want = oracles::igcn(&x, &w, b.data(), &adj, 1);
            let g = Graph::<f32>::new();
            let got = igcn_layer(&g.constant(x.cast()), &g.constant(w.cast()), &g.constant(b.cast()), &adj, IgcnMode::Conv, 1)
                .map_err(|e| e.to_string())?;
            worst = worst.max(got.value().cast::<f64>().max_abs_diff(&want));
        }
    }
    let t = start.elapsed();
    ensure!(worst < 1e-5, "max abs diff {worst:.3e} ≥ 1e-5");
    ensure!(t < Duration::from_secs(60), "took {}", secs(t));
    Ok(format!("30 cases, max abs diff {worst:.2e}, {}", secs(t)))
}

fn k1_identity_is_plain_conv() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f32>::uniform([2, 4, 16, 16], -1.0, 1.0, &mut rng);
    let w = Tensor::<f32>::uniform([5, 4, 3, 3], -1.0, 1.0, &mut rng);
    let b = Tensor::<f32>::uniform([5], -1.0, 1.0, &mut rng);
    let adj = normalize_adjacency(&build_adjacency(1, &AdjacencyScheme::Identity).map_err(|e| e.to_string())?);
    let g = Graph::new();
    let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
    let ig = igcn_layer(&xv, &wv, &bv, &adj, IgcnMode::Conv, 1).map_err(|e| e.to_string())?;
    let plain = xv.conv2d(&wv, Some(&bv), 1, 1).map_err(|e| e.to_string())?.relu();
    let same = ig.value().data().iter().zip(plain.value().data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure!(same, "outputs differ");
    Ok("bitwise equal".into())
}

fn gradient_suite(work: &Path) -> Outcome {
    let start = Instant::now();
    bin(&["gradcheck", "--out", "gradcheck"], work)?;
    let t = start.elapsed();
    let csv = std::fs::read_to_string(work.join("gradcheck/gradcheck.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    for c in ["gcpb", "generator_head", "discriminator", "loss_pixel", "loss_perceptual", "loss_adversarial"] {
        ensure!(rows.iter().any(|r| r[0] == c), "component {c} missing");
    }
    ensure!(rows.iter().all(|r| r[4] == "true"), "failing rows present");
    let worst = rows.iter().map(|r| r[3].parse::<f64>().unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    ensure!(t < Duration::from_secs(300), "took {}", secs(t));
    Ok(format!("{} parameters, max rel err {worst:.2e}, {}", rows.len(), secs(t)))
}

fn metric_oracles() -> Outcome {
    let (mut dp, mut ds): (f64, f64) = (0.0, 0.0);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u8> = (0..768).map(|_| rng.random()).collect();
        let b: Vec<u8> = a.iter().map(|&v| (v as i32 + rng.random_range(-40..=40)).clamp(0, 255) as u8).collect();
        let (a, b) = (Tensor::from_vec([3, 16, 16], a).unwrap(), Tensor::from_vec([3, 16, 16], b).unwrap());
        let (fa, fb) = (a.map(|v| v as f64), b.map(|v| v as f64));
        let (p, s) = image_pair_metrics(&a, &b).map_err(|e| e.to_string())?;
        dp = dp.max((p - oracles::psnr(fa.data(), fb.data(), 255.0)).abs());
        ds = ds.max((s - oracles::ssim(&fa, &fb, 255.0)).abs());
    }
    ensure!(dp < 1e-9 && ds < 1e-6, "PSNR diff {dp:.2e}, SSIM diff {ds:.2e}");
    let p0 = psnr(&[0.0; 16], &[255.0; 16], 255.0).map_err(|e| e.to_string())?;
    ensure!(p0 == 0.0, "PSNR(0,255) = {p0}");
    let x = Tensor::<f64>::uniform([3, 16, 16], 0.0, 255.0, &mut ChaCha8Rng::seed_from_u64(1));
    let s1 = ssim(&x, &x, 255.0).map_err(|e| e.to_string())?;
    ensure!((s1 - 1.0).abs() < 1e-12, "SSIM(x,x) = {s1}");
    Ok(format!("PSNR diff {dp:.1e} dB, SSIM diff {ds:.1e}"))
}

fn degradation_arithmetic() -> Outcome {
    let img = normalize::<f64>(&facegraph::trainer::center_crop(&synthetic_face(5, 144)).unwrap());
    for (task, s, side) in [(Task::Srfc4, 32, 16), (Task::Srfc8, 16, 8)] {
        let (scale, f) = task.degradation();
        for seed in 0..5 {
            let spec = DegradationSpec::new(scale, f, seed).map_err(|e| e.to_string())?;
            let (lq, mask) = degrade_item(&img, &spec, 0).map_err(|e| e.to_string())?;
            ensure!(lq.shape() == [3, s, s], "{task:?}: shape {:?}", lq.shape());
            ensure!(mask.side == side, "{task:?}: hole side {}", mask.side);
            for c in 0..3 {
                for r in 0..s {
                    for col in 0..s {
                        if mask.is_hole(r, col) {
                            ensure!(lq.data()[(c * s + r) * s + col] == 0.0, "{task:?}: hole pixel not zero");
                        }
                    }
                }
            }
            let (lq2, mask2) = degrade_item(&img, &spec, 0).map_err(|e| e.to_string())?;
            ensure!(mask2 == mask && lq2 == lq, "{task:?}: not deterministic under seed {seed}");
        }
    }
    Ok("32x32 with 16x16 hole, 16x16 with 8x8 hole, placement reproducible".into())
}

/// Means of consecutive 100-step blocks of the `total` column.
fn block_means(csv: &str) -> Vec<f64> {
    let totals: Vec<f64> = csv.lines().skip(1).filter_map(|l| l.rsplit(',').next()?.parse().ok()).collect();
    totals.chunks_exact(100).map(|c| c.iter().sum::<f64>() / 100.0).collect()
}

fn synthetic_set(seed: u64, count: usize) -> Vec<(String, Tensor<u8>)> {
    (0..count)
        .map(|i| (format!("face_{i:03}.png"), synthetic_face(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64), 144)))
        .collect()
}

fn toy_training(work: &Path) -> Outcome {
    let start = Instant::now();
    bin(&["synth", "--out", "c6/faces", "--count", "16", "--seed", "1"], work)?;
    bin(&["train", "--profile", "toy", "--task", "srfc4", "--data", "c6/faces", "--out", "c6/run", "--steps", "2000", "--seed", "1"], work)?;
    let t = start.elapsed();
    let ck = work.join("c6/run/checkpoint.mfgt");
    let gen = facegraph::trainer::load_generator::<f32>(&ck).map_err(|e| e.to_string())?;
    let images: Vec<(String, Tensor<u8>)> = facegraph::data::list_images(&work.join("c6/faces"))
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), load_rgb(&p).unwrap()))
        .collect();
    ensure!(images.len() == 16, "expected 16 training images, found {}", images.len());
    let spec = DegradationSpec::new(4, 0.25, 1).map_err(|e| e.to_string())?;
    let ev = evaluate(&gen, &images, &spec).map_err(|e| e.to_string())?;
    let (model, base) = (ev.model.mean_psnr(), ev.baseline.mean_psnr());
    let csv = std::fs::read_to_string(work.join("c6/run/losses.csv")).map_err(|e| e.to_string())?;
    let means = block_means(&csv);
    let rises: Vec<String> = means
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0])
        .map(|(i, w)| format!("steps {}-{}: {:.5} -> {:.5}", 100 * i + 1, 100 * (i + 2), w[0], w[1]))
        .collect();
    let detail = format!("train PSNR {model:.2} vs bicubic {base:.2} dB (+{:.2}), {} blocks, {}", model - base, means.len(), secs(t));
    ensure!(t < Duration::from_secs(15 * 60), "{detail}; over the 15 min budget");
    ensure!(model - base >= 3.0, "{detail}; gain below 3 dB");
    ensure!(rises.is_empty(), "{detail}; 100-step mean loss rises at {}", rises.join(", "));
    Ok(detail)
}

fn mask_monotonicity() -> Outcome {
    let start = Instant::now();
    let train: Vec<Tensor<u8>> = synthetic_set(1, 16).into_iter().map(|(_, t)| t).collect();
    let held_out = synthetic_set(77, 8);
    let mut scores = Vec::new();
    for f in [1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0] {
        let mut cfg = TrainConfig::toy(Task::Srfc4);
        cfg.set_degradation(4, f);
        cfg.steps = 600;
        cfg.lr_decay_steps = 600;
        cfg.seed = 1;
        let mut t = Trainer::<f32>::new(cfg, train.clone()).map_err(|e| e.to_string())?;
        t.train(None).map_err(|e| e.to_string())?;
        let spec = DegradationSpec::new(4, f, 2).map_err(|e| e.to_string())?;
        scores.push(evaluate(&t.generator, &held_out, &spec).map_err(|e| e.to_string())?.model.mean_psnr());
    }
    let detail = format!(
        "held-out PSNR 1/16 {:.2}, 1/8 {:.2}, 1/4 {:.2} dB, {}",
        scores[0],
        scores[1],
        scores[2],
        secs(start.elapsed())
    );
    ensure!(scores[0] > scores[1] && scores[1] > scores[2], "{detail}; ordering violated");
    Ok(detail)
}

fn ablation_harness() -> Outcome {
    let mut cfg = TrainConfig::toy(Task::Srfc4);
    cfg.steps = 20;
    cfg.seed = 3;
    let train: Vec<Tensor<u8>> = synthetic_set(2, 6).into_iter().map(|(_, t)| t).collect();
    let table = run_ablation::<f32>(&train, &synthetic_set(9, 2), &cfg);
    let names: Vec<&str> = table.rows.iter().map(|r| r.variant.name()).collect();
    ensure!(names == ["M1", "M2", "M3"], "rows {names:?}");
    for r in &table.rows {
        match &r.result {
            Ok((p, s)) => ensure!(p.is_finite() && s.is_finite(), "{} not finite", r.variant.name()),
            Err(e) => return Err(format!("{} failed: {e}", r.variant.name())),
        }
    }
    ensure!(table.to_csv().lines().count() == 4, "csv:\n{}", table.to_csv());
    let (gc, dc) = {
        let mut c = cfg.clone();
        c.ablation = Ablation::M2;
        c.variant_configs()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gen = Generator::<f32>::new(&gc, &mut rng).map_err(|e| e.to_string())?;
    let disc = Discriminator::<f32>::new(&dc, &mut rng).map_err(|e| e.to_string())?;
    let layers: Vec<_> = gen.graph_layers().into_iter().chain(disc.layers.iter()).collect();
    ensure!(!layers.is_empty(), "M2 has no graph layers to inspect");
    ensure!(layers.iter().all(|l| l.k() == 1 && l.adjacency.is_identity()), "M2 has a layer with k > 1 or mixing adjacency");
    Ok(format!("{}; M2: {} layers, all k=1 identity", table.table().lines().skip(1).map(str::trim).collect::<Vec<_>>().join(" | "), layers.len()))
}

fn serialization(work: &Path) -> Outcome {
    let images: Vec<Tensor<u8>> = synthetic_set(4, 4).into_iter().map(|(_, t)| t).collect();
    let mut cfg = TrainConfig::toy(Task::Srfc4);
    cfg.steps = 10;
    cfg.seed = 5;
    let mut full = Trainer::<f32>::new(cfg.clone(), images.clone()).map_err(|e| e.to_string())?;
    full.train(None).map_err(|e| e.to_string())?;

    let mut half = Trainer::<f32>::new(TrainConfig { steps: 5, ..cfg.clone() }, images.clone()).map_err(|e| e.to_string())?;
    half.train(None).map_err(|e| e.to_string())?;
    let path = work.join("c9.mfgt");
    half.save_checkpoint(&path).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let entries = load_container(&path).map_err(|e| e.to_string())?;
    ensure!(encode(&entries).map_err(|e| e.to_string())? == bytes, "container re-encode differs");
    ensure!(encode(&decode(&bytes).map_err(|e| e.to_string())?).map_err(|e| e.to_string())? == bytes, "decode/encode not bit exact");
    ensure!(
        encode(&half.checkpoint_entries().map_err(|e| e.to_string())?).map_err(|e| e.to_string())? == bytes,
        "saved checkpoint differs from live state"
    );
    drop(half);

    let mut resumed = Trainer::<f32>::resume_with(cfg, &entries, images).map_err(|e| e.to_string())?;
    resumed.train(None).map_err(|e| e.to_string())?;
    let bits = |t: &Trainer<f32>| t.history.iter().flat_map(|r| [r.pixel, r.perceptual, r.adversarial_g, r.discriminator, r.total]).map(f64::to_bits).collect::<Vec<_>>();
    ensure!(full.history.len() == 10 && bits(&full) == bits(&resumed), "loss histories differ");
    let same_params = full
        .generator
        .params
        .iter()
        .chain(full.discriminator.params.iter())
        .zip(resumed.generator.params.iter().chain(resumed.discriminator.params.iter()))
        .all(|(a, b)| a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure!(same_params, "final parameters differ");
    Ok("container and checkpoint bit exact; 5+5 resumed steps equal 10 uninterrupted".into())
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(work: &Path) -> Outcome {
    let commands: [&[&str]; 8] = [
        &["synth", "--out", "faces", "--count", "4", "--seed", "6"],
        &["synth", "--out", "gt", "--count", "3", "--size", "128", "--seed", "7"],
        &["degrade", "--data", "gt", "--out", "lq", "--seed", "8"],
        &["train", "--profile", "toy", "--data", "faces", "--out", "run", "--steps", "4", "--batch", "2", "--seed", "9"],
        &["restore", "--checkpoint", "run/checkpoint.mfgt", "--data", "lq", "--out", "restored", "--gt", "gt"],
        &["eval", "--restored", "restored", "--data", "gt", "--out", "eval_pairs"],
        &["eval", "--checkpoint", "run/checkpoint.mfgt", "--data", "gt", "--out", "eval_model", "--seed", "8"],
        &["ablate", "--profile", "toy", "--data", "faces", "--out", "ablate", "--steps", "2", "--batch", "1", "--seed", "9"],
    ];
    let mut snaps = Vec::new();
    for run in ["a", "b"] {
        let root = work.join("c10").join(run);
        std::fs::create_dir_all(&root).map_err(|e| e.to_string())?;
        for args in commands {
            bin(args, &root)?;
        }
        snaps.push(snapshot(&root));
    }
    let (a, b) = (&snaps[0], &snaps[1]);
    ensure!(a.len() == b.len(), "file counts differ: {} vs {}", a.len(), b.len());
    for ((pa, da), (pb, db)) in a.iter().zip(b) {
        ensure!(pa == pb && da == db, "{} differs between runs", pa.display());
    }
    Ok(format!("{} commands, {} output files identical", commands.len(), a.len()))
}

#[test]
fn acceptance() {
    let work = tempfile::tempdir().unwrap();
    let w = work.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("igcn oracle equivalence", Box::new(igcn_oracle_equivalence)),
        ("k=1 structural identity", Box::new(k1_identity_is_plain_conv)),
        ("gradient suite", Box::new(move || gradient_suite(w))),
        ("metric oracles", Box::new(metric_oracles)),
        ("degradation arithmetic", Box::new(degradation_arithmetic)),
        ("toy training", Box::new(move || toy_training(w))),
        ("mask-size monotonicity", Box::new(mask_monotonicity)),
        ("ablation harness", Box::new(ablation_harness)),
        ("serialization", Box::new(move || serialization(w))),
        ("determinism", Box::new(move || determinism(w))),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let line = match &outcome {
            Ok(d) => format!("criterion {:>2} {name}: PASS ({d})", i + 1),
            Err(d) => {
                failed.push(i + 1);
                format!("criterion {:>2} {name}: FAIL ({d})", i + 1)
            }
        };
        let _ = writeln!(std::io::stderr().lock(), "{line}");
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
