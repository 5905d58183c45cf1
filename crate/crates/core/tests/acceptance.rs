//! End-to-end acceptance checks, one PASS/FAIL line each.
//!
//! Exits with status 0 and reports failures in its output. Set
//! `EMRA_ACCEPTANCE_STRICT=1` to exit with status 1 when any check fails,
//! and `EMRA_ACCEPTANCE_ONLY=2,3` to run a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use emra_core::checkpoint::Checkpoint;
use emra_core::config::RunConfig;
use emra_core::data::{gen_synthetic, SyntheticSpec};
use emra_core::encoder::EncoderConfig;
use emra_core::gradcheck::{model_grad_check, seeded_problem, GRADCHECK_EPS};
use emra_core::head::fuse;
use emra_core::hra::{neighbor_offset, normalize_associations, AssocLayout, NEIGHBORS};
use emra_core::metrics::{ConfusionMatrix, LabelMap, IGNORE_LABEL};
use emra_core::model::{InferOptions, Model, ModelConfig, Variant};
use emra_core::params::ParamStore;
use emra_core::train::{evaluate, poly_lr, prepare, TrainConfig, Trainer};
use emra_core::{Graph, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn random_image(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(&[size, size, 3], 0.0, 1.0, rng)
}

/// A model whose parameters are drawn wider than the initializer so the
/// attention and association maps are far from uniform.
fn perturbed_model(variant: Variant, seed: u64) -> Model<f64> {
    let mut model = Model::<f64>::new(ModelConfig::new(EncoderConfig::tiny(), variant), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in model.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    model
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig::tiny();
    let mut worst = 0.0f64;
    let mut above = 0;
    let mut coords = 0;
    for seed in 0..3 {
        let (model, image, labels) = seeded_problem(&config, seed).map_err(|e| e.to_string())?;
        let check = model_grad_check(&model, &image, &labels, GRADCHECK_EPS).map_err(|e| e.to_string())?;
        worst = worst.max(check.max_rel_error());
        above += check.count_above(1e-5);
        coords += check.coordinates();
    }
    let elapsed = start.elapsed();
    ensure(
        worst <= 1e-5 && elapsed <= Duration::from_secs(120),
        format!("max relative error {worst:.3e}, {above} of {coords} coordinates above 1e-5, {:.0} s", elapsed.as_secs_f64()),
    )
}

fn tessellation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut pixels = 0;
    for _ in 0..100 {
        let grid = (rng.random_range(1..=7), rng.random_range(1..=7));
        let stride = (rng.random_range(1..=4), rng.random_range(1..=4));
        let layout = AssocLayout::new(grid, stride);
        let spread = rng.random_range(0.1..30.0);
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(random(&[layout.height(), layout.width(), NEIGHBORS], -spread, spread, &mut rng), false);
        let assoc = normalize_associations(&mut g, logits, layout).map_err(|e| e.to_string())?;
        let q = g.value(assoc.q).data();
        for u in 0..layout.height() {
            for v in 0..layout.width() {
                let p = u * layout.width() + v;
                let (gy, gx) = layout.cell(u, v);
                let row = &q[p * NEIGHBORS..(p + 1) * NEIGHBORS];
                for (k, &w) in row.iter().enumerate() {
                    let (dy, dx) = neighbor_offset(k);
                    let (y, x) = (gy as isize + dy, gx as isize + dx);
                    let inside = y >= 0 && x >= 0 && (y as usize) < grid.0 && (x as usize) < grid.1;
                    if !inside && w != 0.0 {
                        return Err(format!("pixel ({u}, {v}) of grid {grid:?} puts {w:e} on off-grid neighbor {k}"));
                    }
                }
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                pixels += 1;
            }
        }
    }
    for seed in 0..5 {
        let model = perturbed_model(Variant::Full, seed);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &random_image(32, &mut rng)).map_err(|e| e.to_string())?;
        let assoc = out.assoc.expect("full model has associations");
        for (row, valid) in g.value(assoc.q).data().chunks(NEIGHBORS).zip(assoc.valid_mask.chunks(NEIGHBORS)) {
            if row.iter().zip(valid).any(|(&w, &ok)| !ok && w != 0.0) {
                return Err("model association map puts mass on a masked neighbor".into());
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            pixels += 1;
        }
    }
    ensure(worst <= 1e-6, format!("{pixels} pixels, max |sum - 1| = {worst:.2e}"))
}

fn max_row_deviation<T: Scalar>(t: &Tensor<T>) -> f64 {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn attention_rows_of<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> (f64, usize) {
    let mut g = Graph::new();
    let out = model.forward(&mut g, image).unwrap();
    let mut maps: Vec<_> = out.encoding.attention.iter().flatten().copied().collect();
    if let Some(gca) = out.gca {
        maps.push(gca.aggregated);
    }
    let worst = maps.iter().map(|&m| max_row_deviation(g.value(m))).fold(0.0, f64::max);
    let rows = maps.iter().map(|&m| g.value(m).shape()[0]).sum();
    (worst, rows)
}

fn attention_stochastic() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut rows = 0;
    for seed in 0..10 {
        for variant in [Variant::Full, Variant::McaOnly, Variant::HraOnly] {
            let model = perturbed_model(variant, seed);
            let image = random_image(32, &mut rng);
            let (w64, r64) = attention_rows_of(&model, &image);
            let (w32, r32) = attention_rows_of(&model.cast::<f32>(), &image.cast::<f32>());
            worst = worst.max(w64).max(w32);
            rows += r64 + r32;
        }
    }
    ensure(worst <= 1e-6, format!("{rows} rows, max |sum - 1| = {worst:.2e}"))
}

fn fusion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut largest = 0;
    for _ in 0..60 {
        let grid = loop {
            let g = (rng.random_range(1..=9), rng.random_range(1..=9));
            if g.0 * g.1 <= 64 {
                break g;
            }
        };
        let stride = (rng.random_range(1..=4), rng.random_range(1..=4));
        let classes = rng.random_range(1..=7);
        let layout = AssocLayout::new(grid, stride);
        let regions = grid.0 * grid.1;
        largest = largest.max(regions);
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(random(&[layout.height(), layout.width(), NEIGHBORS], -3.0, 3.0, &mut rng), false);
        let assoc = normalize_associations(&mut g, logits, layout).map_err(|e| e.to_string())?;
        let region_logits = g.leaf(random(&[regions, classes], -5.0, 5.0, &mut rng), false);
        let fused = fuse(&mut g, &assoc, region_logits).map_err(|e| e.to_string())?;
        let (q, a, f) = (g.value(assoc.q).data(), g.value(region_logits).data(), g.value(fused).data());
        for u in 0..layout.height() {
            for v in 0..layout.width() {
                let p = u * layout.width() + v;
                let (gy, gx) = (u / stride.0, v / stride.1);
                for c in 0..classes {
                    let mut expect = 0.0;
                    for s in 0..regions {
                        let (dy, dx) = ((s / grid.1) as isize - gy as isize, (s % grid.1) as isize - gx as isize);
                        if dy.abs() <= 1 && dx.abs() <= 1 {
                            let k = ((dy + 1) * 3 + dx + 1) as usize;
                            expect += a[s * classes + c] * q[p * NEIGHBORS + k];
                        }
                    }
                    worst = worst.max((f[p * classes + c] - expect).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-6, format!("60 instances up to E = {largest}, max |fused - oracle| = {worst:.2e}"))
}

const OVERFIT_EPOCHS: usize = 300;

fn overfit_recipe(seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: 0.02,
        momentum: 0.95,
        epochs: OVERFIT_EPOCHS,
        batch_size: 1,
        crops_per_image: Some(8),
        crop_size: 32,
        flip: false,
        seed,
        ..TrainConfig::default()
    }
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let samples = gen_synthetic(&SyntheticSpec { count: 8, image_size: 48, num_classes: 4, ..SyntheticSpec::default() })
        .map_err(|e| e.to_string())?;
    let model = Model::<f32>::new(ModelConfig::tiny(), 0).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, overfit_recipe(0)).map_err(|e| e.to_string())?;
    let log = trainer.train(&prepare(&samples)).map_err(|e| e.to_string())?;
    let m = evaluate(&trainer.model, &samples, &InferOptions::default()).map_err(|e| e.to_string())?.metrics();
    let elapsed = start.elapsed();
    ensure(
        m.oa >= 0.95 && m.miou >= 0.85 && elapsed <= Duration::from_secs(600),
        format!(
            "pixel accuracy {:.4}, mIoU {:.4} after {} epochs, final loss {:.4}, {:.0} s",
            m.oa,
            m.miou,
            log.len(),
            log.last().map_or(f64::NAN, |l| l.loss),
            elapsed.as_secs_f64()
        ),
    )
}

const ABLATION_TRAIN: usize = 16;
const ABLATION_EPOCHS: usize = 200;

fn ablation() -> Outcome {
    let train = gen_synthetic(&SyntheticSpec { count: ABLATION_TRAIN, seed: 0, ..SyntheticSpec::default() }).map_err(|e| e.to_string())?;
    let held_out = gen_synthetic(&SyntheticSpec { count: 32, seed: 1, ..SyntheticSpec::default() }).map_err(|e| e.to_string())?;
    let data = prepare::<f32>(&train);
    let mut miou = Vec::new();
    for variant in Variant::ALL {
        let model = Model::<f32>::new(ModelConfig::new(EncoderConfig::tiny(), variant), 0).map_err(|e| e.to_string())?;
        let recipe = TrainConfig { epochs: ABLATION_EPOCHS, ..overfit_recipe(0) };
        let mut trainer = Trainer::new(model, recipe).map_err(|e| e.to_string())?;
        trainer.train(&data).map_err(|e| format!("{variant}: {e}"))?;
        let m = evaluate(&trainer.model, &held_out, &InferOptions::default()).map_err(|e| e.to_string())?.metrics();
        miou.push((variant, m.miou));
    }
    let baseline = miou.iter().find(|(v, _)| *v == Variant::Baseline).unwrap().1;
    let detail = miou.iter().map(|(v, m)| format!("{v} {m:.4}")).collect::<Vec<_>>().join(", ");
    ensure(miou.iter().all(|&(_, m)| m >= baseline), format!("held-out mIoU: {detail}"))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let k = rng.random_range(2..=8);
        let gt: Vec<u8> = (0..64 * 64)
            .map(|_| if rng.random_bool(0.05) { IGNORE_LABEL } else { rng.random_range(0..k) as u8 })
            .collect();
        let pred: Vec<u8> = gt
            .iter()
            .map(|&g| if g != IGNORE_LABEL && rng.random_bool(0.6) { g } else { rng.random_range(0..k) as u8 })
            .collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&LabelMap::new(64, 64, pred.clone()).unwrap(), &LabelMap::new(64, 64, gt.clone()).unwrap())
            .map_err(|e| e.to_string())?;
        let mut naive = vec![vec![0u64; k]; k];
        for (&p, &g) in pred.iter().zip(&gt) {
            if g != IGNORE_LABEL {
                naive[g as usize][p as usize] += 1;
            }
        }
        for (a, row) in naive.iter().enumerate() {
            for (b, &n) in row.iter().enumerate() {
                if cm.get(a, b) != n {
                    return Err(format!("cell ({a}, {b}): {} vs naive {n}", cm.get(a, b)));
                }
            }
        }
        let m = cm.metrics();
        let total: u64 = naive.iter().flatten().sum();
        let mut ious = Vec::new();
        let mut f1s = Vec::new();
        for c in 0..k {
            let tp = naive[c][c] as f64;
            let fp = (0..k).filter(|&g| g != c).map(|g| naive[g][c]).sum::<u64>() as f64;
            let fn_ = (0..k).filter(|&p| p != c).map(|p| naive[c][p]).sum::<u64>() as f64;
            if tp + fp + fn_ == 0.0 {
                continue;
            }
            let iou = tp / (tp + fp + fn_);
            let f1 = 2.0 * tp / (2.0 * tp + fp + fn_);
            worst = worst.max((m.per_class_iou[c] - iou).abs()).max((m.per_class_f1[c] - f1).abs());
            worst = worst.max((m.per_class_f1[c] - 2.0 * m.per_class_iou[c] / (1.0 + m.per_class_iou[c])).abs());
            ious.push(iou);
            f1s.push(f1);
        }
        let oa = (0..k).map(|c| naive[c][c]).sum::<u64>() as f64 / total as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        worst = worst.max((m.oa - oa).abs()).max((m.miou - mean(&ious)).abs()).max((m.mean_f1 - mean(&f1s)).abs());
    }
    ensure(worst <= 1e-12, format!("50 pairs, confusion matrices exact, max metric deviation {worst:.2e}"))
}

fn short_trainer(momentum: f64) -> Trainer<f32> {
    let cfg = ModelConfig::tiny();
    let model = Model::<f32>::new(cfg, 11).unwrap();
    let recipe = TrainConfig { epochs: 4, batch_size: 2, momentum, base_lr: 0.01, seed: 11, ..TrainConfig::default() };
    Trainer::new(model, recipe).unwrap()
}

fn schedule_and_persistence() -> Outcome {
    let first = poly_lr(0, 100, 1e-3, 0.9).map_err(|e| e.to_string())?;
    let last = poly_lr(100, 100, 1e-3, 0.9).map_err(|e| e.to_string())?;
    if first != 1e-3 || last != 0.0 {
        return Err(format!("poly_lr(0) = {first:e}, poly_lr(N) = {last:e}"));
    }
    let samples = gen_synthetic(&SyntheticSpec { count: 4, seed: 9, ..SyntheticSpec::default() }).map_err(|e| e.to_string())?;
    let data = prepare::<f32>(&samples);
    let run = RunConfig::default();
    for momentum in [0.0, 0.9] {
        let mut whole = short_trainer(momentum);
        whole.train(&data).map_err(|e| e.to_string())?;

        let mut split = short_trainer(momentum);
        split.train_until(&data, 2).map_err(|e| e.to_string())?;
        let bytes = Checkpoint::capture(&run, &split).to_bytes();
        let restored = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
        if restored.to_bytes() != bytes {
            return Err(format!("checkpoint roundtrip changed bytes (momentum {momentum})"));
        }
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join("mid.emra");
        restored.save(&path).map_err(|e| e.to_string())?;
        let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        if loaded.to_bytes() != bytes {
            return Err("file roundtrip changed bytes".into());
        }
        let mut resumed = loaded.trainer::<f32>().map_err(|e| e.to_string())?;
        resumed.train(&data).map_err(|e| e.to_string())?;
        let same = whole.model.params.tensors().zip(resumed.model.params.tensors()).all(|(a, b)| {
            a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        if !same || Checkpoint::capture(&run, &whole).to_bytes() != Checkpoint::capture(&run, &resumed).to_bytes() {
            return Err(format!("resumed run differs from the uninterrupted one (momentum {momentum})"));
        }
    }
    Ok("poly_lr(0) = 1e-3, poly_lr(N) = 0, roundtrips byte-identical, resume bitwise equal".into())
}

fn symmetric_image(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random_image(size, rng);
    for y in 0..size {
        for x in size / 2..size {
            for c in 0..3 {
                let v = t.at(&[y, size - 1 - x, c]);
                t.set(&[y, x, c], v);
            }
        }
    }
    t
}

fn inference_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let plain = InferOptions { scales: vec![1.0], flip: false, window: Some(32), stride: None };
    let mut asym = 0.0f64;
    for seed in 0..4 {
        for variant in Variant::ALL {
            let model = perturbed_model(variant, seed);
            let image = random_image(32, &mut rng);
            let tiled = model.infer(&image, &plain).map_err(|e| e.to_string())?;
            let direct = model.predict(&image).map_err(|e| e.to_string())?;
            let bitwise = tiled.probs.data().iter().zip(direct.probs.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !bitwise || tiled.class_map != direct.class_map {
                return Err(format!("{variant} seed {seed}: single-scale window inference differs from forward"));
            }
            let sym = symmetric_image(32, &mut rng);
            let flipped = model
                .infer(&sym, &InferOptions { flip: true, ..plain.clone() })
                .map_err(|e| e.to_string())?;
            for y in 0..32 {
                for x in 0..16 {
                    for c in 0..4 {
                        asym = asym.max((flipped.probs.at(&[y, x, c]) - flipped.probs.at(&[y, 31 - x, c])).abs());
                    }
                }
            }
        }
    }
    ensure(asym <= 1e-5, format!("plain inference bitwise equal, mirrored asymmetry {asym:.2e}"))
}

fn closed_form(cfg: &ModelConfig) -> usize {
    let e = &cfg.encoder;
    let d = e.embed_dim;
    let tokens = if cfg.variant.uses_mca() { e.num_classes } else { 0 };
    let patches = (e.image_size / e.patch_size).pow(2);
    let mut n = e.patch_size * e.patch_size * 3 * d + d + tokens * d + (patches + tokens) * d;
    n += e.depth * (12 * d * d + 13 * d) + 2 * d;
    if cfg.variant.uses_hra() {
        let out = e.output_stride.0 * e.output_stride.1 * 9;
        n += 10 * d + d * out + out;
    }
    if !cfg.variant.uses_mca() {
        n += d * e.num_classes + e.num_classes;
    }
    n
}

fn config_fidelity() -> Outcome {
    let mut lines = Vec::new();
    for (name, heads) in [("ti", 3), ("s", 6), ("b", 12), ("l", 16)] {
        let encoder = EncoderConfig::preset(name).map_err(|e| e.to_string())?;
        if encoder.num_heads() != heads || encoder.embed_dim / 64 != heads {
            return Err(format!("{name}: {} heads, expected {heads}", encoder.num_heads()));
        }
        for variant in Variant::ALL {
            let cfg = ModelConfig::new(encoder.clone(), variant);
            let store = ParamStore::<f32>::zeros(&cfg.param_specs()).map_err(|e| e.to_string())?;
            let model = Model::from_params(cfg.clone(), store).map_err(|e| format!("{name} {variant}: {e}"))?;
            let (formula, allocated) = (closed_form(&cfg), model.params.tensors().map(|t| t.data().len()).sum::<usize>());
            if formula != allocated || cfg.param_count() != allocated {
                return Err(format!("{name} {variant}: closed form {formula}, reported {}, allocated {allocated}", cfg.param_count()));
            }
            if variant == Variant::Full {
                lines.push(format!("{name} {heads} heads {allocated}"));
            }
        }
    }
    Ok(lines.join(", "))
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("gradient check", gradient_check),
        ("association tessellation", tessellation),
        ("attention stochasticity", attention_stochastic),
        ("fusion oracle", fusion_oracle),
        ("overfit", overfit),
        ("ablation ordering", ablation),
        ("metrics oracle", metrics_oracle),
        ("schedule and persistence", schedule_and_persistence),
        ("inference consistency", inference_consistency),
        ("config fidelity", config_fidelity),
    ];
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("single-threaded pool");
    let only: Option<Vec<usize>> =
        std::env::var("EMRA_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("{failed} failed");
    if failed > 0 && std::env::var("EMRA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
