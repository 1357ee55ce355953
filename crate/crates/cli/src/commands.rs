//! Implementations of the six subcommands.

use crate::config::*;
use crate::report::{config_hash, median, CsvFile};
use crate::{CliError, CommonArgs};
use skylos::dataset::{few_shot_subset, generate_dataset, normalize_cir, split_by_route, Dataset, Split};
use skylos::model::{evaluate, fine_tune, predict, train_from, ModelKind, ModelParams, TrainConfig};
use skylos::positioning::{
    error_cdf, positioning_error, select_predicted_los, select_random, select_true_los, snapshot_measurements,
    solve_with_selection, Selection,
};
use skylos::scene::build_scenario;
use skylos::sensing::add_gaussian_noise;
use std::fs;
use std::path::{Path, PathBuf};

fn load_config<C: serde::de::DeserializeOwned>(path: &Path) -> Result<C, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("cannot parse {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(Dataset::load(path)?)
}

/// Route split plus train-statistics normalization, warning on degeneracy.
fn split_and_normalize(ds: Dataset, test_route: u32) -> Result<(Dataset, Split), CliError> {
    let split = split_by_route(&ds, test_route)?;
    if split.is_degenerate() {
        eprintln!("warning: held-out route {test_route} leaves an empty training set");
    }
    let ds = normalize_cir(ds, &split);
    Ok((ds, split))
}

pub fn gen(args: &CommonArgs) -> Result<(), CliError> {
    let mut cfg: GenConfig = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.scenario.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.generation.out = out.clone();
    }
    let scenario = build_scenario(&cfg.scenario)?;
    let ds = generate_dataset(
        &scenario,
        cfg.generation.altitude,
        &cfg.camera.to_spec(),
        &cfg.channel.to_config(),
    )?;
    ds.save(&cfg.generation.out)?;
    let cells: u64 = ds.samples.iter().map(|s| s.labels.values.len() as u64).sum();
    let los: u64 = ds
        .samples
        .iter()
        .map(|s| s.labels.values.iter().map(|&v| v as u64).sum::<u64>())
        .sum();
    println!(
        "wrote {} samples ({} routes) to {}",
        ds.samples.len(),
        scenario.routes.len(),
        cfg.generation.out.display()
    );
    println!("LoS fraction: {:.4}", los as f64 / cells.max(1) as f64);
    Ok(())
}

pub fn train_cmd_config(cfg: &TrainSection) -> TrainConfig {
    TrainConfig {
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        lr: cfg.lr,
        seed: cfg.seed,
        ..TrainConfig::default()
    }
}

pub fn train(args: &CommonArgs) -> Result<(), CliError> {
    let mut cfg: TrainConfigFile = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.train.out = out.clone();
    }
    let hash = config_hash(&cfg);
    let kind = parse_model_kind(&cfg.train.model)?;
    let model_cfg = cfg.model_config.to_config();
    let (ds, split) = split_and_normalize(load_dataset(&cfg.train.dataset)?, cfg.train.test_route)?;
    let tcfg = train_cmd_config(&cfg.train);
    let (params, history) = match &cfg.train.resume_from {
        Some(ckpt) => {
            let params = ModelParams::load(ckpt)?;
            if params.kind != kind {
                return Err(CliError::Config(format!(
                    "checkpoint {} holds a {} model, config asks for {kind}",
                    ckpt.display(),
                    params.kind
                )));
            }
            train_from(params, &ds, &split.train_ids, &split.test_ids, &tcfg)?
        }
        None => skylos::model::train(kind, &model_cfg, &ds, &split, &tcfg)?,
    };
    params.save(&cfg.train.out)?;
    println!("wrote checkpoint {}", cfg.train.out.display());
    if let Some(metrics) = &cfg.train.metrics_out {
        let mut csv = CsvFile::create(metrics, &hash, "epoch,train_loss,test_accuracy")?;
        for h in &history {
            csv.row(format_args!("{},{},{}", h.epoch, h.train_loss, h.test_accuracy))?;
        }
        csv.finish()?;
        println!("wrote metrics {}", metrics.display());
    }
    if let Some(last) = history.last() {
        println!(
            "final train loss {:.4}, test accuracy {:.4}",
            last.train_loss, last.test_accuracy
        );
    }
    Ok(())
}

pub fn eval(args: &CommonArgs) -> Result<(), CliError> {
    let mut cfg: EvalConfigFile = load_config(&args.config)?;
    if let Some(out) = &args.out {
        cfg.eval.per_snapshot_out = Some(out.clone());
    }
    let hash = config_hash(&cfg);
    let params = ModelParams::load(&cfg.eval.checkpoint)?;
    let (ds, split) = split_and_normalize(load_dataset(&cfg.eval.dataset)?, cfg.eval.test_route)?;
    let report = evaluate(&params, &ds, &split.test_ids)?;
    println!("test accuracy: {:.4}", report.accuracy);
    println!("confusion (rows = truth 0/1, cols = predicted 0/1):");
    for t in 0..2 {
        println!("  {:>10} {:>10}", report.confusion[t][0], report.confusion[t][1]);
    }
    if let Some(path) = &cfg.eval.per_snapshot_out {
        let mut csv = CsvFile::create(path, &hash, "route_id,snapshot_index,accuracy")?;
        for s in &report.per_snapshot {
            csv.row(format_args!("{},{},{}", s.route_id, s.snapshot_index, s.accuracy))?;
        }
        csv.finish()?;
        println!("wrote per-snapshot accuracy {}", path.display());
    }
    Ok(())
}

pub fn fewshot(args: &CommonArgs) -> Result<(), CliError> {
    let mut cfg: FewshotConfigFile = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.fewshot.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.fewshot.out = out.clone();
    }
    let hash = config_hash(&cfg);
    let model_cfg = cfg.model_config.to_config();
    let fw = &cfg.fewshot;
    let (source, source_split) = split_and_normalize(load_dataset(&fw.source_dataset)?, fw.source_test_route)?;
    let (target, target_split) = split_and_normalize(load_dataset(&fw.target_dataset)?, fw.target_test_route)?;
    let mut rows: Vec<(usize, u64, f64)> = Vec::new();
    for &seed in &fw.seeds {
        let tcfg = TrainConfig {
            epochs: fw.source_epochs,
            batch_size: fw.batch_size,
            lr: fw.lr,
            seed,
            ..TrainConfig::default()
        };
        let (src_params, _) = skylos::model::train(ModelKind::Fusion, &model_cfg, &source, &source_split, &tcfg)?;
        for &k in &fw.k_list {
            let subset = few_shot_subset(&target_split, k, seed ^ (k as u64).wrapping_mul(0x9E37))?;
            let ft = TrainConfig {
                epochs: fw.fine_tune_epochs,
                batch_size: fw.batch_size,
                lr: fw.fine_tune_lr,
                seed,
                ..TrainConfig::default()
            };
            let tuned = fine_tune(&src_params, &target, &subset, &ft)?;
            let acc = evaluate(&tuned, &target, &target_split.test_ids)?.accuracy;
            println!("seed {seed} k {k}: target accuracy {acc:.4}");
            rows.push((k, seed, acc));
        }
    }
    let mut csv = CsvFile::create(&fw.out, &hash, "k,seed,accuracy")?;
    for (k, seed, acc) in &rows {
        csv.row(format_args!("{k},{seed},{acc}"))?;
    }
    csv.finish()?;
    println!("wrote {}", fw.out.display());
    if let Some(med_path) = &fw.median_out {
        let mut csv = CsvFile::create(med_path, &hash, "k,median_accuracy")?;
        for &k in &fw.k_list {
            let accs: Vec<f64> = rows.iter().filter(|r| r.0 == k).map(|r| r.2).collect();
            csv.row(format_args!("{k},{}", median(&accs)))?;
        }
        csv.finish()?;
        println!("wrote {}", med_path.display());
    }
    Ok(())
}

pub fn noise(args: &CommonArgs) -> Result<(), CliError> {
    let mut cfg: NoiseConfigFile = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.noise.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.noise.out = out.clone();
    }
    let hash = config_hash(&cfg);
    let ns = &cfg.noise;
    let fusion = ModelParams::load(&ns.fusion_checkpoint)?;
    let rgb = ModelParams::load(&ns.rgb_checkpoint)?;
    let (ds, split) = split_and_normalize(load_dataset(&ns.dataset)?, ns.test_route)?;
    let mut csv = CsvFile::create(&ns.out, &hash, "variance,model,accuracy")?;
    for (vi, &variance) in ns.variances.iter().enumerate() {
        // One fixed noise seed per variance level.
        let noise_seed = ns.seed.wrapping_add(vi as u64);
        let mut noisy = ds.clone();
        for &i in &split.test_ids {
            let s = &mut noisy.samples[i];
            s.image = add_gaussian_noise(&s.image, variance, noise_seed.wrapping_add(s.snapshot_index as u64))
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        for (name, params) in [("fusion", &fusion), ("rgb_only", &rgb)] {
            let acc = evaluate(params, &noisy, &split.test_ids)?.accuracy;
            println!("variance {variance:.2} {name}: accuracy {acc:.4}");
            csv.row(format_args!("{variance},{name},{acc}"))?;
        }
    }
    csv.finish()?;
    println!("wrote {}", ns.out.display());
    Ok(())
}

struct PolicyOutcome {
    errors: Vec<f64>,
    non_converged: usize,
    skipped: usize,
}

pub fn position(args: &CommonArgs, strict: bool) -> Result<(), CliError> {
    let mut cfg: PositionConfigFile = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.position.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.position.out_prefix = out.clone();
    }
    let hash = config_hash(&cfg);
    let ps = &cfg.position;
    let params = ModelParams::load(&ps.checkpoint)?;
    let (ds, split) = split_and_normalize(load_dataset(&ps.dataset)?, ps.test_route)?;
    let grid_side = ds.meta.grid_side;
    let mut per_snapshot = CsvFile::create(
        &with_suffix(&ps.out_prefix, "per_snapshot.csv"),
        &hash,
        "snapshot_id,method,error_m,used_rx,converged",
    )?;
    let methods = ["random", "predicted_los", "true_los"];
    let mut outcomes: Vec<PolicyOutcome> = (0..3)
        .map(|_| PolicyOutcome {
            errors: Vec::new(),
            non_converged: 0,
            skipped: 0,
        })
        .collect();
    for &i in &split.test_ids {
        let sample = &ds.samples[i];
        let pred = predict(&params, sample)?;
        let ms = snapshot_measurements(sample, grid_side, Some(&pred));
        let selections: [Result<Selection, _>; 3] = [
            select_random(&ms, ps.random_k, ps.seed.wrapping_add(sample.snapshot_index as u64)),
            select_predicted_los(&ms, &pred),
            select_true_los(&ms),
        ];
        for (mi, sel) in selections.into_iter().enumerate() {
            let snapshot_id = format!("{}:{}", sample.route_id, sample.snapshot_index);
            match sel.and_then(|sel| solve_with_selection(&ms, &sel).map(|est| (sel, est))) {
                Ok((sel, est)) => {
                    let err = positioning_error(&est, sample.uav_pos);
                    if !est.converged {
                        outcomes[mi].non_converged += 1;
                    }
                    outcomes[mi].errors.push(err);
                    per_snapshot.row(format_args!(
                        "{snapshot_id},{},{err},{},{}",
                        methods[mi],
                        sel.indices.len(),
                        est.converged
                    ))?;
                }
                Err(e) => {
                    outcomes[mi].skipped += 1;
                    eprintln!("warning: snapshot {snapshot_id} {}: {e}", methods[mi]);
                }
            }
        }
    }
    per_snapshot.finish()?;
    let mut summary = CsvFile::create(
        &with_suffix(&ps.out_prefix, "summary.csv"),
        &hash,
        "method,mean_error_m,snapshots,non_converged,skipped",
    )?;
    println!("mean positioning error over route {} snapshots:", ps.test_route);
    for (mi, out) in outcomes.iter().enumerate() {
        let mean = out.errors.iter().sum::<f64>() / out.errors.len().max(1) as f64;
        println!(
            "  {:<14} {:>8.3} m  ({} snapshots, {} non-converged)",
            methods[mi],
            mean,
            out.errors.len(),
            out.non_converged
        );
        summary.row(format_args!(
            "{},{},{},{},{}",
            methods[mi],
            mean,
            out.errors.len(),
            out.non_converged,
            out.skipped
        ))?;
        if !out.errors.is_empty() {
            let cdf = error_cdf(&out.errors).map_err(|e| CliError::Data(e.to_string()))?;
            let mut cdf_csv = CsvFile::create(
                &with_suffix(&ps.out_prefix, &format!("cdf_{}.csv", methods[mi])),
                &hash,
                "error_m,cum_prob",
            )?;
            for (e, p) in cdf {
                cdf_csv.row(format_args!("{e},{p}"))?;
            }
            cdf_csv.finish()?;
        }
    }
    summary.finish()?;
    let troubled: usize = outcomes.iter().map(|o| o.non_converged + o.skipped).sum();
    if troubled > 0 {
        let msg = format!("{troubled} snapshot solves did not converge or were skipped");
        if strict {
            return Err(CliError::NonConvergence(msg));
        }
        eprintln!("warning: {msg}");
    }
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if !name.is_empty() {
        name.push('_');
    }
    name.push_str(suffix);
    prefix.with_file_name(name)
}
