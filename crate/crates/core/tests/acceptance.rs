//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 2 3`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mmseg::data::{default_modality_names, derive_regions, generate_phantoms, make_folds, LabelVolume, Region, RegionMask};
use mmseg::embedding::{compute_tsne, extract_features, TsneConfig};
use mmseg::evaluation::{dice, parse_report_csv, DiceReport, FoldId};
use mmseg::missingness::{apply_mask, sample_mask, schedule_p, DropoutSchedule, ModalityMask};
use mmseg::nets::{
    build_model, fuse_concat, fuse_concat_backward, fuse_meanvar, fuse_meanvar_backward, output_size, param_count, FusionMode, Mode, Model,
    NetworkConfig, Volume,
};
use mmseg::pipeline::{evaluate_models, prepare, pretrain_shared_paths, split_fold, train_variant, ExperimentConfig, ToyRun, Variant};
use mmseg::training::{assemble_and_finetune, pretrain_paths, PretrainPlan, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> std::result::Result<(), String> {
    ensure(elapsed <= limit, format!("{what} took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

fn forward_side(model: &mut Model, channels: usize, side: usize) -> std::result::Result<Vec<usize>, String> {
    let x = Volume::zeros(channels, [side; 3]);
    let mask = ModalityMask::all(channels);
    let out = model.forward(&[x], &mask, Mode::Eval).map_err(|e| e.to_string())?;
    let l = &out.logits[0];
    ensure(l.all_finite(), "non-finite logits")?;
    Ok(vec![l.channels, l.dims[0], l.dims[1], l.dims[2]])
}

fn shape_contract() -> Check {
    let t0 = Instant::now();
    let mut toy = build_model(&NetworkConfig::unet(4, 4, 4), 0).map_err(|e| e.to_string())?;
    let shape = forward_side(&mut toy, 4, 108)?;
    ensure(shape == vec![4, 20, 20, 20], format!("[4,108³] → {shape:?}"))?;
    let mut narrow = build_model(&NetworkConfig::unet(4, 1, 4), 0).map_err(|e| e.to_string())?;
    let sizes = [92, 100, 108, 116, 124];
    for s in sizes {
        let predicted = output_size(s, 4).map_err(|e| e.to_string())?;
        let measured = forward_side(&mut narrow, 4, s)?;
        ensure(measured[1..] == [predicted; 3], format!("side {s}: arithmetic {predicted}, network {:?}", &measured[1..]))?;
    }
    ensure(output_size(92, 4).ok() == Some(4), "92 does not map to 4")?;
    ensure(output_size(64, 4).is_err(), "64 at depth 4 accepted")?;
    within(t0.elapsed(), Duration::from_secs(60), "shape checks")?;
    Ok(format!("[4,108³]→[4,20³]; {sizes:?} → {:?}", sizes.map(|s| output_size(s, 4).unwrap())))
}

fn parameter_parity() -> Check {
    let count = |c: NetworkConfig| build_model(&c, 0).map(|m| param_count(&m) as f64).map_err(|e| e.to_string());
    let u32_ = count(NetworkConfig::unet(4, 32, 4))?;
    let u16_ = count(NetworkConfig::unet(4, 16, 4))?;
    let mp = count(NetworkConfig::multipath(FusionMode::Concat, 4, 16, 4))?;
    let r1 = mp / u32_;
    let r2 = u16_ / u32_;
    ensure((0.8..=1.25).contains(&r1), format!("multipath/UNet = {r1:.3}"))?;
    ensure((1.0 / 4.5..=1.0 / 3.5).contains(&r2), format!("UNet16/UNet32 = {r2:.3}"))?;
    Ok(format!("multipath/UNet = {r1:.3}, UNet16/UNet32 = {r2:.3}"))
}

fn numeric_grad(f: &dyn Fn(&[Vec<f64>]) -> f64, x: &[Vec<f64>], i: usize, j: usize) -> f64 {
    let h = 1e-6;
    let mut plus = x.to_vec();
    plus[i][j] += h;
    let mut minus = x.to_vec();
    minus[i][j] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

fn fusion_math() -> Check {
    let t0 = Instant::now();
    let one = ModalityMask::from_indices(1, &[0]).unwrap();
    let single = fuse_meanvar(&[&[1.5f64, -2.0][..]], &one).map_err(|e| e.to_string())?;
    ensure(single == vec![1.5, -2.0, 0.0, 0.0], format!("single path → {single:?}"))?;
    let both = ModalityMask::all(2);
    let mv = fuse_meanvar(&[&[1.0f64][..], &[3.0][..]], &both).map_err(|e| e.to_string())?;
    ensure(mv == vec![2.0, 1.0], format!("{{1,3}} → {mv:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let feats: Vec<Vec<f64>> = (0..4).map(|_| (0..16).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let all4 = ModalityMask::all(4);
    let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
    let base = fuse_meanvar(&refs, &all4).unwrap();
    let perm = [2, 0, 3, 1];
    let permuted: Vec<&[f64]> = perm.iter().map(|&i| feats[i].as_slice()).collect();
    let shuffled = fuse_meanvar(&permuted, &all4).unwrap();
    let perm_err = base.iter().zip(&shuffled).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(perm_err <= 1e-6, format!("permutation changed output by {perm_err:e}"))?;

    // two pathways of 2 channels × 2³ voxels
    let x: Vec<Vec<f64>> = (0..2).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut worst: f64 = 0.0;
    for mode in [FusionMode::Concat, FusionMode::MeanVar] {
        let out_len = 32;
        let w: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fuse = |xs: &[Vec<f64>]| -> Vec<f64> {
            let r: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            match mode {
                FusionMode::Concat => fuse_concat(&r, &both).unwrap(),
                FusionMode::MeanVar => fuse_meanvar(&r, &both).unwrap(),
            }
        };
        let loss = |xs: &[Vec<f64>]| fuse(xs).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let refs: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let analytic = match mode {
            FusionMode::Concat => fuse_concat_backward(&w, &both).unwrap(),
            FusionMode::MeanVar => fuse_meanvar_backward(&refs, &w, &both).unwrap(),
        };
        for i in 0..2 {
            for j in 0..16 {
                let num = numeric_grad(&loss, &x, i, j);
                let rel = (analytic[i][j] - num).abs() / num.abs().max(analytic[i][j].abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    ensure(worst <= 1e-4, format!("gradient relative error {worst:e}"))?;
    within(t0.elapsed(), Duration::from_secs(60), "fusion checks")?;
    Ok(format!("examples exact, permutation error {perm_err:e}, worst gradient relative error {worst:.2e}"))
}

fn dropout_schedule() -> Check {
    let s = DropoutSchedule::default();
    let got = [0, 50, 100, 149].map(|e| schedule_p(e, &s));
    ensure(got == [0.125, 0.25, 0.5, 0.5], format!("schedule {got:?}"))?;
    let keep = ModalityMask::from_indices(4, &[2, 3]).unwrap();
    let scaled = apply_mask(&[1.0f64, 1.0, 1.0, 1.0], &keep).map_err(|e| e.to_string())?;
    ensure(scaled == vec![0.0, 0.0, 2.0, 2.0], format!("keep 2 of 4 → {scaled:?}"))?;
    Ok(format!("p = {got:?}, keep-2-of-4 factor 2"))
}

fn conditional_drop_frequency() -> Check {
    let t0 = Instant::now();
    // enumerate the 16 keep/drop outcomes at p = 0.5 and condition on a survivor
    let mut dropped = 0.0;
    let mut mass = 0.0;
    for outcome in 0u32..16 {
        if outcome == 0 {
            continue;
        }
        let pr = 0.5f64.powi(4);
        mass += pr;
        if outcome & 1 == 0 {
            dropped += pr;
        }
    }
    let exact = dropped / mass;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let m = sample_mask(&mut rng, 0.5, 4).map_err(|e| e.to_string())?;
        ensure(!m.is_empty(), "empty mask drawn")?;
        for (c, &p) in counts.iter_mut().zip(m.present()) {
            *c += (!p) as usize;
        }
    }
    let rates = counts.map(|c| c as f64 / n as f64);
    for r in rates {
        ensure((r - exact).abs() <= 0.01, format!("drop rate {r:.4} vs exact {exact:.4}"))?;
    }
    within(t0.elapsed(), Duration::from_secs(60), "sampling")?;
    Ok(format!("exact {exact:.4}, observed {:?}", rates.map(|r| (r * 1e4).round() / 1e4)))
}

fn freeze_integrity() -> Check {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::toy();
    let data = prepare(generate_phantoms(21, 4, 48, 4).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        epochs: 2,
        batches_per_epoch: 3,
        ..cfg.train.clone()
    };
    let plan = PretrainPlan {
        path_epochs: 2,
        fusion_epochs: 2,
        ..cfg.pretrain.clone()
    };
    let template = cfg.network(Variant::MultipathPretrained, 4);
    let paths: Vec<Model> = pretrain_paths(&data, &train_cfg, &plan, &template, template.pathway_head_width_factor, None, false)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(m, _)| m)
        .collect();
    let mut summary = Vec::new();
    for mode in [FusionMode::Concat, FusionMode::MeanVar] {
        let plan = PretrainPlan {
            replace_pathway_heads: mode == FusionMode::MeanVar,
            ..plan.clone()
        };
        let (model, _) = assemble_and_finetune(&paths, &data, &train_cfg, &plan, mode, 3, None).map_err(|e| e.to_string())?;
        let init = build_model(&model.config().clone(), 3).map_err(|e| e.to_string())?;
        let after: Vec<(String, Vec<f32>)> = model.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
        let fresh: Vec<(String, Vec<f32>)> = init.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect();
        let mut frozen = 0usize;
        let mut max_delta = 0f32;
        let mut head_delta = 0f32;
        for (i, path) in paths.iter().enumerate() {
            let prefix = format!("path{i}.");
            for (name, p) in path.params() {
                let Some(rest) = name.strip_prefix("body.") else { continue };
                let key = format!("{prefix}{rest}");
                let replaced = plan.replace_pathway_heads && rest.starts_with("head.");
                let (_, post) = after.iter().find(|(n, _)| *n == key).ok_or(format!("{key} missing after assembly"))?;
                if replaced {
                    let (_, start) = fresh.iter().find(|(n, _)| *n == key).unwrap();
                    if name.contains("weight") {
                        head_delta = head_delta.max(post.iter().zip(start).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max));
                    }
                } else {
                    frozen += 1;
                    max_delta = max_delta.max(p.value.iter().zip(post).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max));
                }
            }
        }
        ensure(max_delta == 0.0, format!("{mode:?}: frozen parameter moved by {max_delta:e}"))?;
        if mode == FusionMode::MeanVar {
            ensure(head_delta > 0.0, "replaced heads did not train")?;
        }
        summary.push(format!("{mode:?}: {frozen} frozen tensors Δ=0{}", if mode == FusionMode::MeanVar { format!(", head Δmax {head_delta:.2e}") } else { String::new() }));
    }
    within(t0.elapsed(), Duration::from_secs(600), "freeze check")?;
    Ok(summary.join("; "))
}

#[derive(Debug, Clone, Copy, Default)]
struct SeedScores {
    unet_all: f64,
    unet_worst_single: f64,
    unet_single_mean: f64,
    mp_all: f64,
    mp_worst_single: f64,
    mp_single_mean: f64,
}

fn wt(report: &DiceReport, model: &str, subset: &str) -> std::result::Result<f64, String> {
    report
        .get(model, Region::WholeTumor, subset)
        .map(|r| r.mean_dice)
        .ok_or(format!("no WholeTumor row for {model} on {subset}"))
}

fn toy_ordinal() -> Check {
    let t0 = Instant::now();
    let seeds = [0u64, 1, 2];
    let cfg = ExperimentConfig::toy();
    let names = default_modality_names();
    let singles: Vec<String> = names.clone();
    let all = names.join("+");
    let mut per_seed = Vec::new();
    let mut all_dice: Vec<(String, Vec<f64>)> = Variant::ALL.iter().map(|v| (v.name().to_string(), Vec::new())).collect();
    for &seed in &seeds {
        let run = ToyRun { seed, ..ToyRun::default() };
        let raw = generate_phantoms(mmseg::training::derive_seed(seed, 1), run.n_train + run.n_test, run.side, 4).map_err(|e| e.to_string())?;
        let subjects = prepare(raw).map_err(|e| e.to_string())?;
        let ids: Vec<String> = subjects.iter().map(|s| s.id().to_string()).collect();
        let split = make_folds(&ids, (run.n_train + run.n_test) / run.n_test, cfg.fold_seed).map_err(|e| e.to_string())?;
        let (train, test) = split_fold(&subjects, &split, 0).map_err(|e| e.to_string())?;
        let training_ids: BTreeSet<String> = train.iter().map(|s| s.id().to_string()).collect();
        let mut subsets = vec![ModalityMask::all(4)];
        subsets.extend((0..4).map(|i| ModalityMask::from_indices(4, &[i]).unwrap()));
        let paths = pretrain_shared_paths(&train, &cfg, seed, None).map_err(|e| e.to_string())?;
        let mut models = Vec::new();
        for v in Variant::ALL {
            let dedicated = if v == Variant::Dedicated { vec![ModalityMask::all(4)] } else { Vec::new() };
            models.extend(train_variant(v, &train, &cfg, seed, None, Some(&paths), &dedicated).map_err(|e| e.to_string())?);
        }
        let report = evaluate_models(&mut models, &test, &subsets, &training_ids, cfg.eval_input_side, FoldId::Fold(0), seed).map_err(|e| e.to_string())?;
        for (name, values) in all_dice.iter_mut() {
            values.push(wt(&report, name, &all)?);
        }
        let scores = |model: &str| -> std::result::Result<(f64, f64, f64), String> {
            let a = wt(&report, model, &all)?;
            let s: Vec<f64> = singles.iter().map(|n| wt(&report, model, n)).collect::<std::result::Result<_, _>>()?;
            Ok((a, s.iter().cloned().fold(f64::INFINITY, f64::min), s.iter().sum::<f64>() / s.len() as f64))
        };
        let (ua, uw, um) = scores(Variant::Unet.name())?;
        let (ma, mw, mm) = scores(Variant::MultipathPretrained.name())?;
        let sc = SeedScores {
            unet_all: ua,
            unet_worst_single: uw,
            unet_single_mean: um,
            mp_all: ma,
            mp_worst_single: mw,
            mp_single_mean: mm,
        };
        println!("    seed {seed}: {sc:?}");
        per_seed.push(sc);
    }
    let n = per_seed.len() as f64;
    let mean = |f: fn(&SeedScores) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
    let unet_drop = mean(|s| s.unet_all - s.unet_worst_single);
    let mp_drop = mean(|s| s.mp_all - s.mp_worst_single);
    let unet_single = mean(|s| s.unet_single_mean);
    let mp_single = mean(|s| s.mp_single_mean);
    let mut failures = Vec::new();
    if unet_drop <= mp_drop {
        failures.push(format!("(a) UNet drop {unet_drop:.3} ≤ pretrained multipath drop {mp_drop:.3}"));
    }
    if mp_single < unet_single + 0.1 {
        failures.push(format!("(b) single-modality means {mp_single:.3} vs {unet_single:.3} + 0.1"));
    }
    let mut all_means = Vec::new();
    for (name, values) in &all_dice {
        let m = values.iter().sum::<f64>() / values.len() as f64;
        all_means.push(format!("{name} {m:.3}"));
        if m < 0.6 {
            failures.push(format!("(c) {name} All-modality WT Dice {m:.3} < 0.6"));
        }
    }
    println!("    All-modality WT Dice (3-seed means): {}", all_means.join(", "));
    if t0.elapsed() > Duration::from_secs(3600) {
        failures.push(format!("runtime {:.0}s > 3600s", t0.elapsed().as_secs_f64()));
    }
    let summary = format!(
        "drop UNet {unet_drop:.3} vs pretrained multipath {mp_drop:.3}; single-modality mean {unet_single:.3} vs {mp_single:.3}; {:.0}s",
        t0.elapsed().as_secs_f64()
    );
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{summary}; {}", failures.join("; ")))
    }
}

const MICRO_RUN: &str = r#"{
  "n_train": 4, "n_test": 1, "side": 32,
  "tsne_voxels": 100, "tsne_patches": 2, "tsne_iterations": 50,
  "experiment": {
    "base_width": 2, "pathway_width": 1,
    "train": {"epochs": 1, "batches_per_epoch": 1, "batch_size": 1, "input_side": 44, "checkpoint_every": 0},
    "pretrain": {"path_epochs": 1, "fusion_epochs": 1},
    "eval_input_side": 60
  }
}"#;

fn repro(dir: &Path, config: &Path) -> std::result::Result<(), String> {
    let args = ["mmseg", "repro-toy", "--seed", "3", "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    match mmseg::cli::main(args) {
        0 => Ok(()),
        code => Err(format!("repro-toy exited with {code}")),
    }
}

struct MicroRuns {
    first: String,
    second: String,
    markdown: String,
}

fn micro_runs(tmp: &Path) -> std::result::Result<MicroRuns, String> {
    let config = tmp.join("micro.json");
    fs::write(&config, MICRO_RUN).map_err(|e| e.to_string())?;
    let a = tmp.join("a");
    let b = tmp.join("b");
    repro(&a, &config)?;
    repro(&b, &config)?;
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()));
    Ok(MicroRuns {
        first: read(&a.join("report.csv"))?,
        second: read(&b.join("report.csv"))?,
        markdown: read(&a.join("report.md"))?,
    })
}

fn sweep_shape(runs: &MicroRuns) -> Check {
    let reports = parse_report_csv(&runs.first, &default_modality_names()).map_err(|e| e.to_string())?;
    let rows: usize = reports.iter().map(|r| r.rows.len()).sum();
    ensure(rows == 315, format!("{rows} report rows"))?;
    let models: BTreeSet<&str> = reports.iter().flat_map(|r| r.rows.iter().map(|x| x.model.as_str())).collect();
    ensure(models.len() == 7, format!("{} model names", models.len()))?;
    let tables: Vec<&str> = runs.markdown.split("### ").skip(1).collect();
    ensure(tables.len() == 3, format!("{} markdown tables", tables.len()))?;
    for t in &tables {
        let lines: Vec<&str> = t.lines().filter(|l| l.starts_with('|')).collect();
        ensure(lines.len() == 2 + 7, format!("table has {} body rows", lines.len().saturating_sub(2)))?;
        for l in &lines {
            let cells = l.trim_matches('|').split('|').count();
            ensure(cells == 16, format!("row with {cells} cells: {l}"))?;
        }
    }
    Ok(format!("{rows} rows, 3 markdown tables of 7×15"))
}

fn dice_oracle() -> Check {
    let mask = |bits: &[bool]| RegionMask {
        region: Region::WholeTumor,
        dims: [1, 1, bits.len()],
        mask: bits.to_vec(),
    };
    let d = |a: &[bool], b: &[bool]| dice(&mask(a), &mask(b)).map_err(|e| e.to_string());
    let same = d(&[true, true, false], &[true, true, false])?;
    let disjoint = d(&[true, false, false], &[false, true, true])?;
    let half = d(&[true, true, false], &[false, true, true])?;
    let empty = d(&[false; 3], &[false; 3])?;
    ensure(same == 1.0 && disjoint == 0.0 && half == 0.5 && empty == 1.0, format!("{same} {disjoint} {half} {empty}"))?;
    let labels = LabelVolume::new([1, 1, 2], vec![0, 0]).map_err(|e| e.to_string())?;
    let regions = derive_regions(&labels);
    ensure(dice(&regions[0], &regions[0]).map_err(|e| e.to_string())? == 1.0, "empty regions")?;
    Ok("identical 1.0, disjoint 0.0, half-overlap 0.5, empty-empty 1.0".into())
}

fn tsne_pipeline() -> Check {
    let t0 = Instant::now();
    let subjects = prepare(generate_phantoms(8, 2, 48, 4).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut model = build_model(&NetworkConfig::multipath(FusionMode::MeanVar, 4, 16, 3), 2).map_err(|e| e.to_string())?;
    let names = default_modality_names();
    let masks = vec![ModalityMask::all(4), ModalityMask::from_indices(4, &[3]).unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let samples = extract_features(&mut model, &subjects, &mut rng, 4, 1000, &masks, 60, &names).map_err(|e| e.to_string())?;
    ensure(samples.len() == 1000, format!("{} samples", samples.len()))?;
    ensure(samples.iter().all(|s| s.feature.len() == 64), "feature width is not 64")?;
    let (a, b) = samples.split_at(500);
    ensure(a.iter().zip(b).all(|(x, y)| x.voxel_id == y.voxel_id), "voxel ids differ between masks")?;
    ensure(a.iter().all(|s| s.mask_name == a[0].mask_name) && b.iter().all(|s| s.mask_name != a[0].mask_name), "masks are not in contiguous blocks")?;
    let features: Vec<Vec<f32>> = samples.iter().map(|s| s.feature.clone()).collect();
    let cfg = TsneConfig { seed: 9, ..TsneConfig::default() };
    let first = compute_tsne(&features, &cfg).map_err(|e| e.to_string())?;
    let second = compute_tsne(&features, &cfg).map_err(|e| e.to_string())?;
    ensure(first.points.len() == 1000, format!("{} points", first.points.len()))?;
    ensure(first.points.iter().all(|p| p[0].is_finite() && p[1].is_finite()), "non-finite coordinates")?;
    ensure(first.points == second.points, "embedding differs under a fixed seed")?;
    within(t0.elapsed(), Duration::from_secs(300), "t-SNE pipeline")?;
    Ok(format!("1000×64 → 1000×2 finite, deterministic, paired ids; {:.0}s", t0.elapsed().as_secs_f64()))
}

fn determinism(runs: &MicroRuns) -> Check {
    ensure(runs.first == runs.second, "report CSVs differ between identical runs")?;
    Ok(format!("identical report CSVs ({} bytes)", runs.first.len()))
}

fn main() -> ExitCode {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Check| {
        if run(n) {
            let t = Instant::now();
            let r = f();
            let tag = if r.is_ok() { "PASS" } else { "FAIL" };
            let detail = match &r {
                Ok(s) | Err(s) => s.clone(),
            };
            println!("criterion {n:>2} {tag} {name} ({:.1}s): {detail}", t.elapsed().as_secs_f64());
            results.push((n, name, r));
        }
    };
    record(1, "shape contract", &shape_contract);
    record(2, "parameter parity", &parameter_parity);
    record(3, "fusion math", &fusion_math);
    record(4, "dropout schedule", &dropout_schedule);
    record(5, "conditional drop frequency", &conditional_drop_frequency);
    record(6, "freeze integrity", &freeze_integrity);
    record(7, "toy ordinal reproduction", &toy_ordinal);
    if run(8) || run(11) {
        let tmp = tempfile::tempdir().expect("temporary directory");
        let runs = micro_runs(tmp.path());
        match runs {
            Ok(runs) => {
                record(8, "evaluation sweep shape", &|| sweep_shape(&runs));
                record(9, "dice oracle", &dice_oracle);
                record(10, "t-SNE pipeline", &tsne_pipeline);
                record(11, "end-to-end determinism", &|| determinism(&runs));
            }
            Err(e) => {
                record(8, "evaluation sweep shape", &|| Err(e.clone()));
                record(9, "dice oracle", &dice_oracle);
                record(10, "t-SNE pipeline", &tsne_pipeline);
                record(11, "end-to-end determinism", &|| Err(e.clone()));
            }
        }
    } else {
        record(9, "dice oracle", &dice_oracle);
        record(10, "t-SNE pipeline", &tsne_pipeline);
    }
    let failed = results.iter().filter(|(_, _, r)| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
