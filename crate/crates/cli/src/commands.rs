//! The subcommands. Each reads its section of the run config, writes its
//! outputs under the output directory and returns the list of files it made.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use harmonize::classify::{
    centroid_distance, compare_to_baseline, metrics_to_csv, pca_fit, pca_scatter,
    reconstruction_mse, scatter_to_csv, Dataset, Method, MetricRow, METRICS_CSV_HEADER,
    METRIC_NAMES, SCATTER_CSV_HEADER,
};
use harmonize::corrections::{fit_gp, fit_linear, save_correction, CorrectionModel, GpFitOptions};
use harmonize::cyclegan::{
    load_checkpoint, log_to_csv, save_checkpoint, train, Direction, HarmonizationModel, LOG_HEADER,
};
use harmonize::data::{
    apply_site_effect, box1_domains, generate_phantoms, load_idx, load_manifest, load_set,
    save_dataset_with_notes, synthetic_digits, ImageSet, SiteEffectSpec,
};
use harmonize::rng::{derive_seed, rng_from};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde_json::{json, Value};

use crate::config::{
    required, CorrectionMethod, DigitSource, LabelTarget, RunConfig, SimulateMode,
};
use crate::output::{
    finish_run, sha256_dir, sha256_file, validate_output, write_json, write_text, RunManifest,
    RUN_MANIFEST_FORMAT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Train,
    Transform,
    Correct,
    Evaluate,
    Reconstruct,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Train => "train",
            Self::Transform => "transform",
            Self::Correct => "correct",
            Self::Evaluate => "evaluate",
            Self::Reconstruct => "reconstruct",
            Self::Report => "report",
        }
    }
}

pub const SUMMARY_FILE: &str = "summary.json";

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Resolve the config, run `cmd` and write the snapshot and manifest.
pub fn run(cmd: Command, mut cfg: RunConfig) -> Result<PathBuf> {
    cfg.resolve();
    ensure!(cfg.threads >= 1, "threads must be at least 1");
    let out = cfg.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write_snapshot(&out)?;
    match cmd {
        Command::Simulate => simulate(&cfg, &out)?,
        Command::Train => train_cmd(&cfg, &out)?,
        Command::Transform => transform(&cfg, &out)?,
        Command::Correct => correct(&cfg, &out)?,
        Command::Evaluate => evaluate(&cfg, &out)?,
        Command::Reconstruct => reconstruct(&cfg, &out)?,
        Command::Report => report(&cfg, &out)?,
    }
    Ok(out)
}

fn notes(cmd: Command, cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut n = BTreeMap::new();
    n.insert("command".into(), cmd.name().into());
    n.insert("seed".into(), cfg.seed.to_string());
    n
}

fn save_sets(
    out: &Path,
    sets: &[(String, ImageSet)],
    previews: usize,
    notes: BTreeMap<String, String>,
) -> Result<()> {
    let named: Vec<(&str, &ImageSet)> = sets.iter().map(|(n, s)| (n.as_str(), s)).collect();
    save_dataset_with_notes(out, &named, previews, notes)?;
    let back = load_manifest(out)?;
    for (name, set) in sets {
        let loaded = load_set(out, name)?;
        ensure!(loaded == *set, "set {name} did not read back identically");
    }
    ensure!(
        back.sets.len() == sets.len(),
        "dataset manifest lists the wrong number of sets"
    );
    Ok(())
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sim = &cfg.simulate;
    let mut n = notes(Command::Simulate, cfg);
    let sets = match sim.mode {
        SimulateMode::Phantom => {
            n.insert("mode".into(), "phantom".into());
            phantom_sets(cfg)?
        }
        SimulateMode::Box1 => {
            n.insert("mode".into(), "box1".into());
            box1_sets(cfg)?
        }
    };
    save_sets(out, &sets, sim.previews, n)
}

fn phantom_sets(cfg: &RunConfig) -> Result<Vec<(String, ImageSet)>> {
    let p = &cfg.simulate.phantom;
    let site_a = p.site_a.unwrap_or_else(SiteEffectSpec::identity);
    let site_b = p
        .site_b
        .unwrap_or_else(|| SiteEffectSpec::scanner_b(derive_seed(cfg.seed, "site-b")));
    let (train, test) = p.cohorts.map_or((0, 0), |c| (c.train, c.test));
    ensure!(
        p.subjects > 0,
        "phantom mode needs at least one paired subject"
    );
    let total = p.subjects + 2 * train + 2 * test;
    let all = generate_phantoms(total, p.size, derive_seed(cfg.seed, "phantoms"))?;
    let a = apply_site_effect(&all, &site_a, "A")?;
    let b = apply_site_effect(&all, &site_b, "B")?;
    let range = |lo: usize, len: usize| (lo..lo + len).collect::<Vec<_>>();
    let mut sets = vec![
        ("paired_a".to_string(), a.select(&range(0, p.subjects))),
        ("paired_b".to_string(), b.select(&range(0, p.subjects))),
    ];
    if train + test > 0 {
        // Each site sees its own subjects, so no subject crosses sites.
        let mut lo = p.subjects;
        for (name, src, len) in [
            ("train_a", &a, train),
            ("train_b", &b, train),
            ("test_a", &a, test),
            ("test_b", &b, test),
        ] {
            sets.push((name.to_string(), src.select(&range(lo, len))));
            lo += len;
        }
    }
    Ok(sets)
}

fn box1_sets(cfg: &RunConfig) -> Result<Vec<(String, ImageSet)>> {
    let b = &cfg.simulate.box1;
    let (train, test) = match b.source {
        DigitSource::Synthetic => (
            synthetic_digits(
                b.train_images.unwrap_or(2000),
                derive_seed(cfg.seed, "digits-train"),
            )?,
            synthetic_digits(
                b.test_images.unwrap_or(1000),
                derive_seed(cfg.seed, "digits-test"),
            )?,
        ),
        DigitSource::Mnist => {
            let dir = b
                .mnist_dir
                .as_deref()
                .context("box1 with source \"mnist\" needs simulate.box1.mnist_dir (or use source \"synthetic\")")?;
            let missing: Vec<&str> = MNIST_FILES
                .iter()
                .copied()
                .filter(|f| !dir.join(f).is_file())
                .collect();
            if !missing.is_empty() {
                bail!(
                    "MNIST files missing from {}: {}.\nDownload the four IDX files from http://yann.lecun.com/exdb/mnist/ \
                     (or a mirror such as https://ossci-datasets.s3.amazonaws.com/mnist/), decompress them with \
                     `gunzip *.gz`, and place them in that directory. Set simulate.box1.source to \"synthetic\" to \
                     run without MNIST.",
                    dir.display(),
                    missing.join(", ")
                );
            }
            let take = |set: ImageSet, n: Option<usize>| match n {
                Some(n) if n < set.len() => set.select(&(0..n).collect::<Vec<_>>()),
                _ => set,
            };
            let train = load_idx(
                &dir.join(MNIST_FILES[0]),
                Some(&dir.join(MNIST_FILES[1])),
                "mnist",
            )?;
            let test = load_idx(
                &dir.join(MNIST_FILES[2]),
                Some(&dir.join(MNIST_FILES[3])),
                "mnist",
            )?;
            (take(train, b.train_images), take(test, b.test_images))
        }
    };
    let (train_a, train_b) =
        box1_domains(&train, b.noise_sigma, derive_seed(cfg.seed, "box1-train"))?;
    let (test_a, test_b) = box1_domains(&test, b.noise_sigma, derive_seed(cfg.seed, "box1-test"))?;
    Ok(vec![
        ("train_a".into(), train_a),
        ("train_b".into(), train_b),
        ("test_a".into(), test_a),
        ("test_b".into(), test_b),
    ])
}

fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    let t = &cfg.train;
    let data = required(&t.data, "train.data")?;
    let x = load_set(data, &t.x)?;
    let y = load_set(data, &t.y)?;
    let model = match &t.resume {
        Some(dir) => {
            load_checkpoint(dir).with_context(|| format!("resuming from {}", dir.display()))?
        }
        None => HarmonizationModel::new(t.model.clone(), derive_seed(cfg.seed, "model-init"))?,
    };
    let start = model.step;
    let outcome = train(
        model,
        &x,
        &y,
        t.batch_size,
        derive_seed(cfg.seed, "train"),
        &t.stopping,
        |_| {},
    )?;
    ensure!(
        outcome.last.all_finite(),
        "training produced non-finite parameters"
    );
    for (name, model) in [("checkpoint", &outcome.best), ("last", &outcome.last)] {
        save_checkpoint(model, &out.join(name))?;
        let back = load_checkpoint(&out.join(name))?;
        ensure!(
            back.hash() == model.hash(),
            "checkpoint {name} did not read back identically"
        );
    }
    write_text(&out.join("train_log.csv"), &log_to_csv(&outcome.log))?;
    let summary = json!({
        "command": "train",
        "start_step": start,
        "steps_taken": outcome.log.len(),
        "final_step": outcome.last.step,
        "stop_reason": outcome.stop_reason,
        "evaluations": outcome.evaluations,
        "warnings": outcome.warnings,
        "best_model_hash": outcome.best.hash(),
        "last_model_hash": outcome.last.hash(),
        "final_cycle_loss": outcome.log.last().map(|e| e.cycle_loss),
    });
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    validate_output(&out.join("train_log.csv"), Some(LOG_HEADER))?;
    finish(
        out,
        Command::Train,
        cfg,
        &["checkpoint", "last", "train_log.csv", SUMMARY_FILE],
    )
}

fn set_names(data: &Path, listed: &[String]) -> Result<Vec<String>> {
    if !listed.is_empty() {
        return Ok(listed.to_vec());
    }
    Ok(load_manifest(data)?
        .sets
        .into_iter()
        .map(|e| e.name)
        .collect())
}

fn gan_sets(
    checkpoint: &Path,
    data: &Path,
    sets: &[String],
    dir: Direction,
    keep_domain: bool,
    only: Option<&str>,
) -> Result<(Vec<(String, ImageSet)>, String)> {
    let model = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mut out = Vec::new();
    for name in set_names(data, sets)? {
        let set = load_set(data, &name)?;
        if only.is_some_and(|d| d != set.domain) {
            out.push((name, set));
            continue;
        }
        let mut t = model
            .transform(&set, dir)
            .with_context(|| format!("transforming set {name}"))?;
        ensure!(
            t.images()
                .iter()
                .all(|im| im.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0)),
            "GAN output for set {name} left [-1, 1]"
        );
        if keep_domain {
            t.domain = set.domain.clone();
        }
        out.push((name, t));
    }
    Ok((out, model.hash()))
}

fn transform(cfg: &RunConfig, out: &Path) -> Result<()> {
    let t = &cfg.transform;
    let ckpt = required(&t.checkpoint, "transform.checkpoint")?;
    let data = required(&t.data, "transform.data")?;
    let (sets, hash) = gan_sets(ckpt, data, &t.sets, t.direction, false, None)?;
    let mut n = notes(Command::Transform, cfg);
    n.insert("model_hash".into(), hash);
    n.insert(
        "direction".into(),
        serde_json::to_value(t.direction)?
            .as_str()
            .unwrap_or_default()
            .into(),
    );
    save_sets(out, &sets, cfg.simulate.previews, n)
}

fn controls(data: &Path, name: &str, label: u32) -> Result<ImageSet> {
    let set = load_set(data, name)?;
    let picked = match &set.content_labels {
        Some(l) => set.select(
            &(0..set.len())
                .filter(|&i| l[i] == label)
                .collect::<Vec<_>>(),
        ),
        None => set,
    };
    ensure!(
        picked.len() >= 2,
        "control set {name} has fewer than 2 images with label {label}"
    );
    Ok(picked)
}

fn correct(cfg: &RunConfig, out: &Path) -> Result<()> {
    let c = &cfg.correct;
    let data = required(&c.data, "correct.data")?;
    let mut n = notes(Command::Correct, cfg);
    n.insert("method".into(), c.method.method().to_string());
    let sets = match c.method {
        CorrectionMethod::Gan => {
            let ckpt = required(&c.checkpoint, "correct.checkpoint")?;
            let (sets, hash) = gan_sets(
                ckpt,
                data,
                &c.sets,
                c.direction,
                true,
                c.translate_domain.as_deref(),
            )?;
            n.insert("model_hash".into(), hash);
            sets
        }
        CorrectionMethod::Linear | CorrectionMethod::Gp => {
            let reference = controls(data, &c.reference_controls, c.control_label)?;
            let site = controls(data, &c.site_controls, c.control_label)?;
            ensure!(
                reference.image_shape() == site.image_shape(),
                "control sets have different image shapes"
            );
            let model = if c.method == CorrectionMethod::Linear {
                CorrectionModel::Linear(fit_linear(&[&reference, &site])?)
            } else {
                let opts = GpFitOptions {
                    restarts: c.gp.restarts,
                    max_iter: c.gp.max_iter,
                    grad_tol: c.gp.grad_tol,
                    seed: derive_seed(cfg.seed, "gp-fit"),
                    ..GpFitOptions::default()
                };
                let (m, search) = fit_gp(&[&reference, &site], &opts)?;
                n.insert("gp_log_ml".into(), format!("{}", search.lml));
                CorrectionModel::Gp(m)
            };
            let model_dir = out.join("model");
            save_correction(&model, &model_dir)?;
            n.insert("model_hash".into(), sha256_dir(&model_dir)?);
            n.insert(
                "controls".into(),
                format!("{}+{}", reference.len(), site.len()),
            );
            let mut res = Vec::new();
            for name in set_names(data, &c.sets)? {
                let set = load_set(data, &name)?;
                ensure!(
                    set.image_shape() == reference.image_shape(),
                    "set {name} has image shape {:?} but the model was fitted on {:?}",
                    set.image_shape(),
                    reference.image_shape()
                );
                res.push((
                    name.clone(),
                    model
                        .apply_set(&set)
                        .with_context(|| format!("correcting set {name}"))?,
                ));
            }
            res
        }
    };
    save_sets(out, &sets, cfg.simulate.previews, n)
}

fn method_sets(data: &Path, sets: &[String]) -> Result<Vec<ImageSet>> {
    ensure!(
        sets.len() >= 2,
        "an evaluation input needs at least two sets"
    );
    sets.iter()
        .map(|name| {
            let mut s = load_set(data, name)?;
            // Scatter points are grouped by set, whatever the domain tags say.
            s.domain = name.clone();
            Ok(s)
        })
        .collect()
}

fn mean_metrics(rows: &[MetricRow], method: Method) -> Value {
    let sel: Vec<&MetricRow> = rows.iter().filter(|r| r.method == method).collect();
    let mut m = serde_json::Map::new();
    for name in METRIC_NAMES {
        let v = sel
            .iter()
            .map(|r| r.metric(name).unwrap_or(f64::NAN))
            .sum::<f64>()
            / sel.len() as f64;
        m.insert(name.to_string(), json!(v));
    }
    Value::Object(m)
}

fn evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let e = &cfg.evaluate;
    ensure!(!e.inputs.is_empty(), "evaluate.inputs is empty");
    let mut per_method = Vec::new();
    for input in &e.inputs {
        let sets = method_sets(&input.data, &input.sets)?;
        let refs: Vec<&ImageSet> = sets.iter().collect();
        let mut data = match e.target {
            LabelTarget::Domain => Dataset::by_set(&refs)?,
            LabelTarget::Content => Dataset::by_content(&refs)?,
        };
        if e.shuffle_labels {
            let mut rng = rng_from(derive_seed(cfg.seed, "shuffle-labels"));
            data.labels.shuffle(&mut rng);
        }
        per_method.push((input.method, data, sets));
    }
    let pairs: Vec<(Method, &Dataset)> = per_method.iter().map(|(m, d, _)| (*m, d)).collect();
    let rows = harmonize::classify::evaluate_methods(
        &pairs,
        &e.pipeline,
        e.folds,
        derive_seed(cfg.seed, "cv"),
        cfg.threads,
    )?;
    write_text(&out.join("fold_metrics.csv"), &metrics_to_csv(&rows))?;
    let mut files = vec!["fold_metrics.csv".to_string()];
    let mut summary = serde_json::Map::new();
    summary.insert("command".into(), json!("evaluate"));
    summary.insert("target".into(), serde_json::to_value(e.target)?);
    summary.insert("folds".into(), json!(e.folds));
    summary.insert("shuffle_labels".into(), json!(e.shuffle_labels));
    let mut means = serde_json::Map::new();
    for (m, _, _) in &per_method {
        means.insert(m.to_string(), mean_metrics(&rows, *m));
    }
    summary.insert("mean_metrics".into(), Value::Object(means));
    let has_baseline = per_method.iter().any(|(m, _, _)| *m == Method::Baseline);
    if has_baseline && per_method.len() > 1 {
        let report = compare_to_baseline(&rows)?;
        write_json(&out.join("comparison.json"), &report)?;
        files.push("comparison.json".into());
    }
    if e.scatter {
        let mut dist = serde_json::Map::new();
        for (m, data, sets) in &per_method {
            let x = DMatrix::from_fn(data.len(), data.rows[0].len(), |i, j| data.rows[i][j]);
            let pca = pca_fit(&x, 2)?;
            let refs: Vec<&ImageSet> = sets.iter().collect();
            let points = pca_scatter(&pca, &refs)?;
            let file = format!("scatter_{m}.csv");
            write_text(&out.join(&file), &scatter_to_csv(&points))?;
            validate_output(&out.join(&file), Some(SCATTER_CSV_HEADER))?;
            files.push(file);
            dist.insert(
                m.to_string(),
                json!(centroid_distance(
                    &points,
                    &sets[0].domain,
                    &sets[1].domain
                )?),
            );
        }
        summary.insert("centroid_distance".into(), Value::Object(dist));
    }
    write_json(&out.join(SUMMARY_FILE), &Value::Object(summary))?;
    files.push(SUMMARY_FILE.into());
    validate_output(&out.join("fold_metrics.csv"), Some(METRICS_CSV_HEADER))?;
    let refs: Vec<&str> = files.iter().map(String::as_str).collect();
    finish(out, Command::Evaluate, cfg, &refs)
}

pub const RECONSTRUCTION_CSV_HEADER: &str = "method,id,mse_corrected,mse_baseline,decrease_pct";

fn reconstruct(cfg: &RunConfig, out: &Path) -> Result<()> {
    let r = &cfg.reconstruct;
    let reference = required(&r.reference, "reconstruct.reference")?;
    let baseline = required(&r.baseline, "reconstruct.baseline")?;
    ensure!(!r.corrected.is_empty(), "reconstruct.corrected is empty");
    let reference = load_set(&reference.data, &reference.set)?;
    let baseline = load_set(&baseline.data, &baseline.set)?;
    ensure!(
        reference.subject_ids.is_some() && baseline.subject_ids.is_some(),
        "reconstruction needs paired images with subject IDs at both sites"
    );
    let mut csv = format!("{RECONSTRUCTION_CSV_HEADER}\n");
    let mut methods = serde_json::Map::new();
    for c in &r.corrected {
        let corrected = load_set(&c.data, &c.set)?;
        let rep = reconstruction_mse(&corrected, &reference, &baseline)
            .with_context(|| format!("method {}", c.method))?;
        for s in &rep.subjects {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                c.method, s.id, s.mse_corrected, s.mse_baseline, s.decrease_pct
            ));
        }
        methods.insert(
            c.method.to_string(),
            json!({
                "mean_mse_corrected": rep.mean_mse_corrected,
                "mean_mse_baseline": rep.mean_mse_baseline,
                "mean_decrease_pct": rep.mean_decrease_pct,
                "subjects": rep.subjects.len(),
            }),
        );
    }
    write_text(&out.join("reconstruction.csv"), &csv)?;
    write_json(
        &out.join(SUMMARY_FILE),
        &json!({ "command": "reconstruct", "methods": Value::Object(methods) }),
    )?;
    validate_output(
        &out.join("reconstruction.csv"),
        Some(RECONSTRUCTION_CSV_HEADER),
    )?;
    finish(
        out,
        Command::Reconstruct,
        cfg,
        &["reconstruction.csv", SUMMARY_FILE],
    )
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, f64)>) {
    match v {
        Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                out.push((prefix.to_string(), f));
            }
        }
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        _ => {}
    }
}

fn report(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure!(!cfg.report.runs.is_empty(), "report.runs is empty");
    let mut runs = Vec::new();
    let mut csv = String::from("run,key,value\n");
    for (i, dir) in cfg.report.runs.iter().enumerate() {
        let text = std::fs::read_to_string(dir.join("manifest.json"))
            .with_context(|| format!("run {} has no manifest.json", dir.display()))?;
        let raw: Value = serde_json::from_str(&text)?;
        let entry = if raw.get("format").and_then(Value::as_str) == Some(RUN_MANIFEST_FORMAT) {
            let m: RunManifest = serde_json::from_value(raw)?;
            for f in &m.files {
                let p = dir.join(&f.path);
                let actual = if p.is_dir() {
                    sha256_dir(&p)?
                } else {
                    sha256_file(&p)?
                };
                ensure!(
                    actual == f.sha256,
                    "{} changed since the run wrote it",
                    p.display()
                );
            }
            let summary: Value =
                serde_json::from_str(&std::fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
            let mut flat = Vec::new();
            flatten("", &summary, &mut flat);
            for (k, v) in flat {
                csv.push_str(&format!("{i},{k},{v}\n"));
            }
            json!({ "dir": dir, "command": m.command, "seed": m.seed, "files": m.files.len(), "summary": summary })
        } else {
            let m = load_manifest(dir)?;
            json!({
                "dir": dir,
                "command": m.notes.get("command"),
                "notes": m.notes,
                "sets": m.sets.iter().map(|s| json!({ "name": s.name, "domain": s.domain })).collect::<Vec<_>>(),
            })
        };
        runs.push(entry);
    }
    write_json(&out.join("report.json"), &json!({ "runs": runs }))?;
    write_text(&out.join("report.csv"), &csv)?;
    validate_output(&out.join("report.csv"), Some("run,key,value"))?;
    finish(out, Command::Report, cfg, &["report.json", "report.csv"])
}

fn finish(out: &Path, cmd: Command, cfg: &RunConfig, files: &[&str]) -> Result<()> {
    for f in files {
        let p = out.join(f);
        if !p.is_dir() {
            validate_output(&p, None)?;
        }
    }
    let mut list: Vec<PathBuf> = files.iter().map(PathBuf::from).collect();
    list.push(PathBuf::from(crate::config::RESOLVED_CONFIG_FILE));
    finish_run(out, cmd.name(), cfg.seed, &list, BTreeMap::new())?;
    Ok(())
}
