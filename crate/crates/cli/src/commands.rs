//! One function per subcommand. Each loads its inputs, delegates the work
//! to the library, writes the declared artifacts plus a manifest, and
//! prints a JSON summary on stdout.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rpkit::engine::{
    apply_maxabs, apply_standardize, fit_maxabs, fit_standardize, load_dense, project_with_stats,
    save_dense, NormStats, ProjectionPlan,
};
use rpkit::metrics::{bench_schemes, pairwise_distortion};
use rpkit::nn::{
    eval_error, load_checkpoint, save_checkpoint, LossKind, Model, NnInput, TrainConfig,
};
use rpkit::schemes::RpSchemeSpec;
use rpkit::select::{chi_square_scores, f_score, info_gain, select_k_best, tfidf_transform};
use rpkit::sparse::{DenseMatrix, LabeledDataset};
use rpkit::synth::{generate, paper_preset, SynthSpec};
use rpkit::{Error, Result};
use serde::Deserialize;
use serde_json::json;

use crate::arch::{self, NetPlan, RpChoice};
use crate::data::{
    self, keep_columns, read_json, save_libsvm, write_json, write_labels_sidecar, Features,
};
use crate::manifest::{parent_dir, RunManifest};
use crate::{
    BenchArgs, DistortionArgs, EvalArgs, NormMode, ProjectArgs, SelectArgs, SynthGenArgs,
    TfidfArgs, TrainArgs,
};

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("JSON values always encode"));
}

pub fn synth_gen(args: &SynthGenArgs) -> Result<()> {
    let started = Instant::now();
    let mut jobs: Vec<(PathBuf, SynthSpec)> = Vec::new();
    match &args.preset {
        Some(name) => {
            for mut spec in paper_preset(name, args.preset_divisor, args.seed)? {
                spec.sep_mean = args.sep_mean;
                spec.sep_std = args.sep_std;
                spec.train_fraction = args.train_fraction;
                let dir = args.out.join(format!("rho{}_psi{}", spec.rho, spec.psi));
                jobs.push((dir, spec));
            }
        }
        None => {
            let need = |v: Option<usize>, name: &str| {
                v.ok_or_else(|| Error::InvalidArg(format!("--{name} is required without --preset")))
            };
            let need_f = |v: Option<f64>, name: &str| {
                v.ok_or_else(|| Error::InvalidArg(format!("--{name} is required without --preset")))
            };
            let mut spec = SynthSpec::new(
                need(args.n, "n")?,
                need(args.d, "d")?,
                need_f(args.rho, "rho")?,
                need_f(args.psi, "psi")?,
                args.seed,
            );
            spec.sep_mean = args.sep_mean;
            spec.sep_std = args.sep_std;
            spec.train_fraction = args.train_fraction;
            jobs.push((args.out.clone(), spec));
        }
    }

    let mut manifest = RunManifest::new("synth gen", args, Some(args.seed))?;
    let mut reports = Vec::new();
    let mut dirs: Vec<PathBuf> = Vec::new();
    for (dir, spec) in &jobs {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let out = generate(spec)?;
        let train_path = dir.join("train.libsvm");
        let test_path = dir.join("test.libsvm");
        let side_path = dir.join("synth.json");
        save_libsvm(&train_path, &out.train, None)?;
        save_libsvm(&test_path, &out.test, None)?;
        write_json(
            &side_path,
            &json!({ "spec": spec, "significant_features": out.significant_features }),
        )?;
        let nnz = out.train.features.nnz() + out.test.features.nnz();
        reports.push(json!({
            "dir": dir,
            "train_rows": out.train.n_rows(),
            "test_rows": out.test.n_rows(),
            "d": spec.d,
            "nnz": nnz,
            "density": nnz as f64 / (spec.n_total as f64 * spec.d as f64),
        }));
        for p in [&train_path, &test_path, &side_path] {
            manifest = manifest.output(p);
        }
        dirs.push(dir.clone());
    }
    print_json(&json!({ "generated": reports }));
    let dir_refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    manifest.write(started, &dir_refs)
}

fn norm_kind(stats: &NormStats) -> &'static str {
    match stats {
        NormStats::Standardize { .. } => "standardize",
        NormStats::MaxAbs { .. } => "maxabs",
    }
}

pub fn project(args: &ProjectArgs) -> Result<()> {
    let started = Instant::now();
    let loaded = data::load_dataset(&args.input)?;
    let labels = loaded.labels;
    let mut x = loaded.features.into_sparse();

    let mut stats_from = match &args.stats_from {
        Some(p) => {
            if args.normalize == NormMode::None {
                return Err(Error::InvalidArg(
                    "--stats-from needs --normalize standardize or maxabs".into(),
                ));
            }
            let (_, stats) = load_dense(p)?;
            Some(stats.ok_or_else(|| {
                Error::Format(format!("{}: no normalization statistics recorded", p.display()))
            })?)
        }
        None => None,
    };
    let check_kind = |stats: NormStats, want: &str| {
        if norm_kind(&stats) == want {
            Ok(stats)
        } else {
            Err(Error::InvalidArg(format!(
                "--stats-from records {} statistics but --normalize asks for {want}",
                norm_kind(&stats)
            )))
        }
    };

    let mut norm_stats = None;
    if args.normalize == NormMode::Maxabs {
        let stats = match stats_from.take() {
            Some(s) => check_kind(s, "maxabs")?,
            None => fit_maxabs(&x),
        };
        x = apply_maxabs(&x, &stats)?;
        norm_stats = Some(stats);
    }

    let spill_dir = args
        .spill_dir
        .clone()
        .or_else(|| std::env::var_os("RP_SPILL_DIR").map(PathBuf::from));
    let mut spec = RpSchemeSpec::new(args.scheme, x.n_cols(), args.k, args.seed);
    spec.srht_n_hint = x.n_rows().max(1) as u64;
    let plan = ProjectionPlan {
        spec,
        h: args.h,
        v: args.v,
        memory_budget: args.budget_bytes,
        spill_dir,
    };
    let (mut out, run_stats) = project_with_stats(&x, &plan)?;

    if args.normalize == NormMode::Standardize {
        let stats = match stats_from.take() {
            Some(s) => check_kind(s, "standardize")?,
            None => fit_standardize(&out)?,
        };
        out = apply_standardize(&out, &stats)?;
        norm_stats = Some(stats);
    }

    data::ensure_parent(&args.out)?;
    save_dense(&args.out, &out, norm_stats.as_ref())?;
    let mut manifest = RunManifest::new("project", args, Some(args.seed))?
        .input(&args.input)
        .output(&args.out);
    if let Some(info) = &labels {
        let side = write_labels_sidecar(&args.out, info)?;
        manifest = manifest.output(&side);
    }
    print_json(&json!({
        "rows": out.n_rows(),
        "d": plan.spec.d,
        "k": args.k,
        "scheme": args.scheme.name(),
        "nnz_p": run_stats.nnz_p,
        "spilled": run_stats.spilled,
        "blocks": run_stats.blocks,
        "normalize": args.normalize,
        "out": args.out,
    }));
    manifest.write(started, &[parent_dir(&args.out)])
}

pub fn select(args: &SelectArgs) -> Result<()> {
    let started = Instant::now();
    if args.out_scores.is_none() && args.out_reduced.is_none() {
        return Err(Error::InvalidArg(
            "nothing to do: pass --out-scores and/or --out-reduced".into(),
        ));
    }
    let loaded = data::load_dataset(&args.input)?;
    let Features::Sparse(x) = loaded.features else {
        return Err(Error::Format(format!(
            "{}: feature selection expects LIBSVM input",
            args.input.display()
        )));
    };
    let info = loaded.labels.expect("LIBSVM input always carries labels");
    let scores = match args.method.as_str() {
        "chi2" => chi_square_scores(&x, &info.labels)?,
        "fscore" => f_score(&x, &info.labels)?,
        "ig" => info_gain(&x, &info.labels)?,
        other => {
            return Err(Error::InvalidArg(format!(
                "unknown method {other:?} (expected chi2, fscore or ig)"
            )))
        }
    };

    let mut manifest = RunManifest::new("select", args, None)?.input(&args.input);
    let mut dirs: Vec<&Path> = Vec::new();
    if let Some(p) = &args.out_scores {
        data::ensure_parent(p)?;
        fs::write(p, scores.to_csv()).map_err(|e| Error::io(p, e))?;
        manifest = manifest.output(p);
        dirs.push(parent_dir(p));
    }
    let mut kept = None;
    let mut columns_path = None;
    if let Some(p) = &args.out_reduced {
        let k = args.k.expect("clap requires --k with --out-reduced");
        let mut cols = select_k_best(&scores.scores, k)?;
        cols.sort_unstable();
        let reduced = keep_columns(&x, &cols)?;
        let ds = LabeledDataset::new(reduced, info.labels.clone(), info.n_classes)?;
        save_libsvm(p, &ds, Some(&info.label_values))?;
        let cols_path = append_ext(p, ".columns.json");
        write_json(&cols_path, &json!({ "columns": cols }))?;
        manifest = manifest.output(p).output(&cols_path);
        dirs.push(parent_dir(p));
        kept = Some(cols.len());
        columns_path = Some(cols_path);
    }
    print_json(&json!({
        "method": args.method,
        "rows": x.n_rows(),
        "features": x.n_cols(),
        "selected": kept,
        "scores": args.out_scores,
        "reduced": args.out_reduced,
        "columns": columns_path,
    }));
    manifest.write(started, &dirs)
}

pub fn tfidf(args: &TfidfArgs) -> Result<()> {
    let started = Instant::now();
    let loaded = data::load_dataset(&args.input)?;
    let Features::Sparse(x) = loaded.features else {
        return Err(Error::Format(format!(
            "{}: TF-IDF expects LIBSVM input",
            args.input.display()
        )));
    };
    let info = loaded.labels.expect("LIBSVM input always carries labels");

    #[derive(Deserialize)]
    struct IdfFile {
        idf: Vec<f64>,
    }
    let fitted: Option<Vec<f64>> = match &args.apply {
        Some(p) => Some(read_json::<IdfFile>(p)?.idf),
        None => None,
    };
    let nnz_in = x.nnz();
    let (weighted, idf) = tfidf_transform(&x, fitted.as_deref())?;
    let nnz_out = weighted.nnz();
    let ds = LabeledDataset::new(weighted, info.labels, info.n_classes)?;
    save_libsvm(&args.out, &ds, Some(&info.label_values))?;

    let mut manifest = RunManifest::new("tfidf", args, None)?.input(&args.input).output(&args.out);
    if let Some(p) = &args.apply {
        manifest = manifest.input(p);
    }
    let mut idf_path = None;
    if args.fit {
        let p = append_ext(&args.out, ".idf.json");
        write_json(&p, &json!({ "idf": idf }))?;
        manifest = manifest.output(&p);
        idf_path = Some(p);
    }
    print_json(&json!({
        "rows": ds.n_rows(),
        "terms": ds.features.n_cols(),
        "mode": if args.fit { "fit" } else { "apply" },
        "nnz_in": nnz_in,
        "nnz_out": nnz_out,
        "out": args.out,
        "idf": idf_path,
    }));
    manifest.write(started, &[parent_dir(&args.out)])
}

/// Sidecar fields the trainer needs back when resuming.
#[derive(Deserialize)]
struct CheckpointSidecar {
    train_config: Option<TrainConfig>,
}

fn append_ext(path: &Path, ext: &str) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(ext);
    PathBuf::from(name)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let cp_path = args.checkpoint_dir.join("model.rpnn");
    let hist_path = args.checkpoint_dir.join("history.csv");

    let loaded = data::load_dataset(&args.data)?;
    let data_is_sparse = matches!(loaded.features, Features::Sparse(_));
    let train_set = data::to_labeled(loaded, &args.data)?;
    let eval_set = match &args.eval {
        Some(p) => Some(data::to_labeled(data::load_dataset(p)?, p)?),
        None => None,
    };

    let (mut model, config, resume_state) = if args.resume {
        let (model, state) = load_checkpoint(&cp_path)?;
        let state = state.ok_or_else(|| {
            Error::Format(format!("{}: no trainer state recorded, cannot resume", cp_path.display()))
        })?;
        let side = append_ext(&cp_path, ".json");
        let sidecar: CheckpointSidecar = read_json(&side)?;
        let mut config = sidecar.train_config.ok_or_else(|| {
            Error::Format(format!("{}: no training configuration recorded", side.display()))
        })?;
        if let Some(epochs) = args.epochs {
            config.epochs = epochs;
        }
        (model, config, Some(state))
    } else {
        let arch_str = args
            .arch
            .as_deref()
            .ok_or_else(|| Error::InvalidArg("--arch is required for a fresh run".into()))?;
        if args.rp != RpChoice::None && !data_is_sparse {
            return Err(Error::Format(format!(
                "{}: projection layers train on raw LIBSVM input, not a projected dataset",
                args.data.display()
            )));
        }
        let widths = arch::parse_arch(arch_str)?;
        let seed = args.seed.unwrap_or(0);
        let epochs = args.epochs.unwrap_or(10);
        let specs = arch::layer_specs(&NetPlan {
            d: train_set.features.n_cols(),
            widths: &widths,
            n_classes: train_set.n_classes,
            rp: args.rp,
            scheme: args.rp_scheme,
            seed,
            batch_norm: args.bn,
            act: args.act,
            dropout: args.dropout,
            eta: args.eta.unwrap_or(1.0),
        })?;
        let model = Model::build(&specs, seed)?;
        let config = TrainConfig {
            lr0: args.lr0.unwrap_or(0.1),
            lr_decay: args.lr_decay.unwrap_or(0.998),
            momentum0: args.momentum.unwrap_or(0.5),
            momentum_max: args.momentum_max.unwrap_or(0.9),
            momentum_ramp_epochs: args.momentum_ramp.unwrap_or((epochs / 10).max(1)),
            l2: args.l2.unwrap_or(0.0),
            batch_size: args.batch.unwrap_or(100),
            epochs,
            seed,
            eta: args.eta,
        };
        (model, config, None)
    };

    let out_w = model
        .output_width()
        .ok_or_else(|| Error::Format("checkpoint holds an empty model".into()))?;
    let loss = if out_w == 1 { LossKind::BinaryCe } else { LossKind::SoftmaxCe };

    let (history, state) =
        rpkit::nn::train(&mut model, loss, &train_set, eval_set.as_ref(), &config, resume_state)?;

    fs::create_dir_all(&args.checkpoint_dir).map_err(|e| Error::io(&args.checkpoint_dir, e))?;
    save_checkpoint(&model, Some(&state), Some(&config), &cp_path)?;
    let csv = history.to_csv();
    if args.resume && hist_path.exists() {
        let body = csv.split_once('\n').map(|(_, b)| b).unwrap_or("");
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&hist_path)
            .map_err(|e| Error::io(&hist_path, e))?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(&hist_path, e))?;
    } else {
        fs::write(&hist_path, &csv).map_err(|e| Error::io(&hist_path, e))?;
    }

    let rows = read_history(&hist_path)?;
    let best = best_row(&rows);
    print_json(&json!({
        "epochs_run": history.epochs.len(),
        "total_epochs": rows.len(),
        "best_epoch": best.map(|r| r.epoch),
        "best_eval_error": best.and_then(|r| r.eval_error),
        "best_train_loss": best.map(|r| r.train_loss),
        "final_train_loss": rows.last().map(|r| r.train_loss),
        "checkpoint": cp_path,
    }));

    let mut manifest = RunManifest::new("train", args, Some(config.seed))?
        .input(&args.data)
        .output(&cp_path)
        .output(&append_ext(&cp_path, ".json"))
        .output(&hist_path);
    if let Some(p) = &args.eval {
        manifest = manifest.input(p);
    }
    manifest.write(started, &[&args.checkpoint_dir])
}

struct HistRow {
    epoch: usize,
    train_loss: f64,
    eval_error: Option<f64>,
}

fn read_history(path: &Path) -> Result<Vec<HistRow>> {
    let bad = |line: usize, msg: &str| Error::Parse { line, msg: format!("{}: {msg}", path.display()) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(i + 1, "expected 5 history columns"));
        }
        let epoch = fields[0].parse().map_err(|_| bad(i + 1, "bad epoch"))?;
        let train_loss = fields[1].parse().map_err(|_| bad(i + 1, "bad train loss"))?;
        let eval_error = if fields[2].is_empty() {
            None
        } else {
            Some(fields[2].parse().map_err(|_| bad(i + 1, "bad eval error"))?)
        };
        rows.push(HistRow { epoch, train_loss, eval_error });
    }
    Ok(rows)
}

/// Row with the lowest evaluation error (training loss when no evaluation
/// ran); ties keep the earliest epoch.
fn best_row(rows: &[HistRow]) -> Option<&HistRow> {
    let key = |r: &HistRow| r.eval_error.unwrap_or(r.train_loss);
    let mut best: Option<&HistRow> = None;
    for r in rows {
        if best.is_none_or(|b| key(r) < key(b)) {
            best = Some(r);
        }
    }
    best
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let loaded = data::load_dataset(&args.data)?;
    let n = loaded.features.n_rows();
    let error_rate = match loaded.features {
        Features::Sparse(x) => {
            let info = loaded.labels.expect("LIBSVM input always carries labels");
            let ds = LabeledDataset::new(x, info.labels, info.n_classes)?;
            eval_error(&model, &ds, args.batch)?
        }
        Features::Dense(m) => {
            let info = loaded.labels.ok_or_else(|| {
                Error::Format(format!("{}: labels sidecar missing", args.data.display()))
            })?;
            dense_error_rate(&model, &m, &info.labels, args.batch)?
        }
    };
    let report = json!({
        "checkpoint": args.checkpoint,
        "data": args.data,
        "examples": n,
        "error_rate": error_rate,
    });
    print_json(&report);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let report_path = dir.join("report.json");
        write_json(&report_path, &report)?;
        RunManifest::new("eval", args, None)?
            .input(&args.checkpoint)
            .input(&args.data)
            .output(&report_path)
            .write(started, &[dir])?;
    }
    Ok(())
}

/// [`eval_error`] for a pre-projected dense dataset.
fn dense_error_rate(
    model: &Model,
    features: &DenseMatrix,
    labels: &[usize],
    batch: usize,
) -> Result<f64> {
    let n = features.n_rows();
    if n == 0 {
        return Err(Error::InvalidArg("evaluation set is empty".into()));
    }
    if batch == 0 {
        return Err(Error::InvalidArg("batch size must be positive".into()));
    }
    if labels.len() != n {
        return Err(Error::DimMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    let mut wrong = 0usize;
    let mut at = 0;
    while at < n {
        let hi = (at + batch).min(n);
        let chunk = features.row_slice(at, hi)?;
        let pred = model.predict(NnInput::Dense(&chunk))?;
        for r in 0..pred.n_rows() {
            let row = pred.row(r);
            let predicted = if row.len() == 1 { usize::from(row[0] >= 0.5) } else { argmax(row) };
            if predicted != labels[at + r] {
                wrong += 1;
            }
        }
        at = hi;
    }
    Ok(wrong as f64 / n as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    let started = Instant::now();
    let report = bench_schemes(
        args.n,
        args.d,
        &args.k_list,
        args.density,
        &args.schemes,
        args.repeats,
        args.seed,
    )?;
    data::ensure_parent(&args.out)?;
    fs::write(&args.out, report.to_csv()).map_err(|e| Error::io(&args.out, e))?;
    print_json(&json!({ "cells": report.rows.len(), "out": args.out }));
    RunManifest::new("bench", args, Some(args.seed))?
        .output(&args.out)
        .write(started, &[parent_dir(&args.out)])
}

pub fn distortion(args: &DistortionArgs) -> Result<()> {
    let started = Instant::now();
    let loaded = data::load_dataset(&args.input)?;
    let x = loaded.features.into_sparse();
    let mut spec = RpSchemeSpec::new(args.scheme, x.n_cols(), args.k, args.seed);
    spec.srht_n_hint = x.n_rows().max(1) as u64;
    let r = rpkit::engine::project(&x, &ProjectionPlan::new(spec))?;
    let report = pairwise_distortion(&x, &r, args.pairs, args.seed)?;
    write_json(
        &args.out,
        &json!({
            "scheme": args.scheme.name(),
            "d": x.n_cols(),
            "k": args.k,
            "seed": args.seed,
            "report": report,
        }),
    )?;
    print_json(&json!({
        "pairs": report.n_pairs,
        "max_distortion": report.max_distortion,
        "mean_distortion": report.mean_distortion,
        "out": args.out,
    }));
    RunManifest::new("distortion", args, Some(args.seed))?
        .input(&args.input)
        .output(&args.out)
        .write(started, &[parent_dir(&args.out)])
}
