use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use harmonize::classify::{ComparisonReport, Method};
use harmonize::cyclegan::{read_checkpoint_manifest, ModelConfig, StoppingRule};
use harmonize::data::{
    encode_idx_images, encode_idx_labels, load_manifest, load_set, pad_to, synthetic_digits,
};
use harmonize::nets::{DiscriminatorConfig, GeneratorConfig};
use harmonize_cli::commands::MNIST_FILES;
use harmonize_cli::config::{
    Cohorts, CorrectedRef, CorrectionMethod, DigitSource, LabelTarget, MethodInput, SetRef,
    SimulateMode,
};
use harmonize_cli::output::{sha256_dir, RunManifest};
use harmonize_cli::{run, Command, RunConfig};
use serde_json::Value;

fn base(out: &Path, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        out: Some(out.to_path_buf()),
        ..RunConfig::default()
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        generator: GeneratorConfig {
            base_filters: 2,
            n_residual_blocks: 1,
            ..GeneratorConfig::default()
        },
        discriminator: DiscriminatorConfig::narrow(16),
        ..ModelConfig::default()
    }
}

fn phantoms(out: &Path, subjects: usize, seed: u64, cohorts: Option<Cohorts>) -> PathBuf {
    let mut cfg = base(out, seed);
    cfg.simulate.phantom.subjects = subjects;
    cfg.simulate.phantom.size = 16;
    cfg.simulate.phantom.cohorts = cohorts;
    run(Command::Simulate, cfg).unwrap()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn phantom_simulation_pairs_subjects_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = phantoms(&tmp.path().join("a"), 64, 7, None);
    let d2 = phantoms(&tmp.path().join("b"), 64, 7, None);
    let a = load_set(&d1, "paired_a").unwrap();
    let b = load_set(&d1, "paired_b").unwrap();
    assert_eq!((a.len(), b.len()), (64, 64));
    assert_eq!(a.subject_ids, b.subject_ids);
    assert_ne!(a.domain, b.domain);
    assert_eq!(sha256_dir(&d1).unwrap(), sha256_dir(&d2).unwrap());
    assert!(d1.join("resolved_config.json").is_file());
    let m = load_manifest(&d1).unwrap();
    assert_eq!(m.notes["command"], "simulate");

    let d3 = phantoms(&tmp.path().join("c"), 64, 8, None);
    assert_ne!(sha256_dir(&d1).unwrap(), sha256_dir(&d3).unwrap());
}

#[test]
fn cohorts_keep_sites_on_disjoint_subjects() {
    let tmp = tempfile::tempdir().unwrap();
    let d = phantoms(tmp.path(), 4, 1, Some(Cohorts { train: 6, test: 5 }));
    let ids = |name: &str| load_set(&d, name).unwrap().subject_ids.unwrap();
    let mut all: Vec<String> = ["paired_a", "train_a", "train_b", "test_a", "test_b"]
        .iter()
        .flat_map(|n| ids(n))
        .collect();
    assert_eq!(all.len(), 4 + 12 + 10);
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 26);
    assert_eq!(ids("paired_a"), ids("paired_b"));
}

#[test]
fn missing_mnist_explains_download() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = base(&tmp.path().join("out"), 0);
    cfg.simulate.mode = SimulateMode::Box1;
    cfg.simulate.box1.mnist_dir = Some(tmp.path().join("nothing-here"));
    let err = format!("{:#}", run(Command::Simulate, cfg).unwrap_err());
    assert!(err.contains("Download"), "{err}");
    assert!(err.contains("train-images-idx3-ubyte"), "{err}");
}

fn fake_mnist(
    dir: &Path,
    n_train: usize,
    n_test: usize,
) -> (harmonize::data::ImageSet, harmonize::data::ImageSet) {
    std::fs::create_dir_all(dir).unwrap();
    let train = synthetic_digits(n_train, 11).unwrap();
    let test = synthetic_digits(n_test, 12).unwrap();
    std::fs::write(dir.join(MNIST_FILES[0]), encode_idx_images(&train)).unwrap();
    std::fs::write(
        dir.join(MNIST_FILES[1]),
        encode_idx_labels(train.content_labels.as_ref().unwrap()),
    )
    .unwrap();
    std::fs::write(dir.join(MNIST_FILES[2]), encode_idx_images(&test)).unwrap();
    std::fs::write(
        dir.join(MNIST_FILES[3]),
        encode_idx_labels(test.content_labels.as_ref().unwrap()),
    )
    .unwrap();
    (train, test)
}

#[test]
fn box1_from_idx_files_balances_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let mnist = tmp.path().join("mnist");
    let (train, _) = fake_mnist(&mnist, 203, 60);
    let mut cfg = base(&tmp.path().join("out"), 3);
    cfg.simulate.mode = SimulateMode::Box1;
    cfg.simulate.box1.mnist_dir = Some(mnist);
    let out = run(Command::Simulate, cfg).unwrap();
    let a = load_set(&out, "train_a").unwrap();
    let b = load_set(&out, "train_b").unwrap();
    assert_eq!(a.len() + b.len(), 203);
    assert_eq!(a.image_shape(), Some((32, 32)));
    // Equal label marginals up to one leftover image per label.
    let truth = train.content_labels.unwrap();
    for digit in 0..10u32 {
        let count = |s: &harmonize::data::ImageSet| {
            s.content_labels
                .as_ref()
                .unwrap()
                .iter()
                .filter(|&&l| l == digit)
                .count()
        };
        let total = truth.iter().filter(|&&l| l == digit).count();
        assert_eq!(count(&a) + count(&b), total);
        assert!(count(&a).abs_diff(count(&b)) <= 1, "digit {digit}");
    }
    // Clean-domain images are the padded, byte-quantized originals.
    let padded = pad_to(
        &harmonize::data::load_idx(&tmp.path().join("mnist").join(MNIST_FILES[0]), None, "x")
            .unwrap(),
        32,
    )
    .unwrap();
    let pool: Vec<_> = padded.images().iter().map(|t| t.data().to_vec()).collect();
    assert!(a
        .images()
        .iter()
        .all(|im| pool.contains(&im.data().to_vec())));
}

#[test]
fn synthetic_box1_needs_no_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = base(tmp.path(), 3);
    cfg.simulate.mode = SimulateMode::Box1;
    cfg.simulate.box1.source = DigitSource::Synthetic;
    cfg.simulate.box1.train_images = Some(40);
    cfg.simulate.box1.test_images = Some(20);
    let out = run(Command::Simulate, cfg).unwrap();
    assert_eq!(load_set(&out, "test_b").unwrap().len(), 10);
}

fn train_cfg(
    tmp: &Path,
    data: &Path,
    name: &str,
    steps: u64,
    resume: Option<PathBuf>,
) -> RunConfig {
    let mut cfg = base(&tmp.join(name), 5);
    cfg.train.data = Some(data.to_path_buf());
    cfg.train.x = "paired_b".into();
    cfg.train.y = "paired_a".into();
    cfg.train.model = tiny_model();
    cfg.train.batch_size = 2;
    cfg.train.stopping = StoppingRule {
        max_steps: steps,
        eval_every: 1,
        window: 1,
        patience: usize::MAX,
    };
    cfg.train.resume = resume;
    cfg
}

#[test]
fn train_writes_checkpoint_log_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(&tmp.path().join("data"), 6, 2, None);
    let one = run(Command::Train, train_cfg(tmp.path(), &data, "one", 1, None)).unwrap();
    let ck = read_checkpoint_manifest(&one.join("last")).unwrap();
    assert_eq!(ck.step, 1);
    let log = std::fs::read_to_string(one.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let m: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(one.join("manifest.json")).unwrap()).unwrap();
    assert!(m.files.iter().any(|f| f.path == "checkpoint"));

    let two = run(
        Command::Train,
        train_cfg(tmp.path(), &data, "two", 3, Some(one.join("last"))),
    )
    .unwrap();
    let log = std::fs::read_to_string(two.join("train_log.csv")).unwrap();
    let steps: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, ["2", "3"]);
    assert_eq!(summary(&two)["steps_taken"], 2);

    // Resuming lands on the same weights as training straight through.
    let straight = run(
        Command::Train,
        train_cfg(tmp.path(), &data, "straight", 3, None),
    )
    .unwrap();
    assert_eq!(
        summary(&straight)["last_model_hash"],
        summary(&two)["last_model_hash"]
    );
}

#[test]
fn linear_correction_leaves_reference_site_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(&tmp.path().join("data"), 12, 4, None);
    let mut cfg = base(&tmp.path().join("lin"), 4);
    cfg.correct.method = CorrectionMethod::Linear;
    cfg.correct.data = Some(data.clone());
    cfg.correct.reference_controls = "paired_a".into();
    cfg.correct.site_controls = "paired_b".into();
    let out = run(Command::Correct, cfg).unwrap();
    assert_eq!(
        std::fs::read(out.join("paired_a.ntn")).unwrap(),
        std::fs::read(data.join("paired_a.ntn")).unwrap()
    );
    assert_ne!(
        std::fs::read(out.join("paired_b.ntn")).unwrap(),
        std::fs::read(data.join("paired_b.ntn")).unwrap()
    );
    let m = load_manifest(&out).unwrap();
    assert_eq!(m.notes["method"], "linear");
    assert_eq!(
        m.notes["model_hash"],
        sha256_dir(&out.join("model")).unwrap()
    );
}

#[test]
fn gp_correction_runs_and_records_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(&tmp.path().join("data"), 10, 4, None);
    let mut cfg = base(&tmp.path().join("gp"), 4);
    cfg.correct.method = CorrectionMethod::Gp;
    cfg.correct.data = Some(data);
    cfg.correct.reference_controls = "paired_a".into();
    cfg.correct.site_controls = "paired_b".into();
    cfg.correct.sets = vec!["paired_b".into()];
    cfg.correct.gp.restarts = 1;
    let out = run(Command::Correct, cfg).unwrap();
    let m = load_manifest(&out).unwrap();
    assert_eq!(m.notes["method"], "gp");
    assert!(m.notes["gp_log_ml"].parse::<f64>().unwrap().is_finite());
    assert_eq!(m.sets.len(), 1);
}

#[test]
fn gan_correction_stays_in_range() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(&tmp.path().join("data"), 4, 2, None);
    let trained = run(Command::Train, train_cfg(tmp.path(), &data, "t", 1, None)).unwrap();
    let mut cfg = base(&tmp.path().join("gan"), 2);
    cfg.correct.method = CorrectionMethod::Gan;
    cfg.correct.data = Some(data.clone());
    cfg.correct.checkpoint = Some(trained.join("checkpoint"));
    cfg.correct.sets = vec!["paired_b".into()];
    let out = run(Command::Correct, cfg.clone()).unwrap();
    let set = load_set(&out, "paired_b").unwrap();
    assert!(set
        .images()
        .iter()
        .all(|im| im.data().iter().all(|v| v.abs() <= 1.0)));
    assert_eq!(set.domain, "B");
    let m = load_manifest(&out).unwrap();
    assert_eq!(m.notes["method"], "gan");

    // Restricted to site B, site-A sets are copied byte for byte.
    let mut only_b = cfg.clone();
    only_b.correct.sets = vec!["paired_a".into(), "paired_b".into()];
    only_b.correct.translate_domain = Some("B".into());
    only_b.out = Some(tmp.path().join("gan-b"));
    let ob = run(Command::Correct, only_b).unwrap();
    assert_eq!(
        std::fs::read(ob.join("paired_a.ntn")).unwrap(),
        std::fs::read(data.join("paired_a.ntn")).unwrap()
    );
    assert_eq!(
        std::fs::read(ob.join("paired_b.ntn")).unwrap(),
        std::fs::read(out.join("paired_b.ntn")).unwrap()
    );

    // The transform subcommand is the raw translation with the target tag.
    let mut t = base(&tmp.path().join("tr"), 2);
    t.transform.checkpoint = cfg.correct.checkpoint.clone();
    t.transform.data = Some(data);
    t.transform.sets = vec!["paired_b".into()];
    let tr = run(Command::Transform, t).unwrap();
    let raw = load_set(&tr, "paired_b").unwrap();
    assert_eq!(raw.images(), set.images());
}

fn evaluate_cfg(tmp: &Path, name: &str, data: &Path, methods: &[Method]) -> RunConfig {
    let mut cfg = base(&tmp.join(name), 9);
    cfg.evaluate.inputs = methods
        .iter()
        .map(|&method| MethodInput {
            method,
            data: data.to_path_buf(),
            sets: vec!["paired_a".into(), "paired_b".into()],
        })
        .collect();
    cfg.evaluate.folds = 5;
    cfg.evaluate.pipeline.pca_components = 10;
    cfg
}

#[test]
fn evaluating_baseline_against_itself_finds_no_difference() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(&tmp.path().join("data"), 20, 3, None);
    let mut cfg = evaluate_cfg(tmp.path(), "e1", &data, &[Method::Baseline, Method::Gan]);
    cfg.evaluate.scatter = true;
    let out = run(Command::Evaluate, cfg.clone()).unwrap();
    let report: ComparisonReport =
        serde_json::from_str(&std::fs::read_to_string(out.join("comparison.json")).unwrap())
            .unwrap();
    let gan = report.method(Method::Gan).unwrap();
    for m in &gan.metrics {
        assert!(m.no_difference, "{}", m.metric);
        assert!(m.differences.iter().all(|(_, d)| *d == 0.0));
    }
    let s = summary(&out);
    assert_eq!(s["mean_metrics"]["baseline"], s["mean_metrics"]["gan"]);
    assert!(out.join("scatter_gan.csv").is_file());
    let csv = std::fs::read_to_string(out.join("fold_metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10);

    cfg.out = Some(tmp.path().join("e2"));
    cfg.threads = 3;
    let again = run(Command::Evaluate, cfg).unwrap();
    for f in [
        "fold_metrics.csv",
        "comparison.json",
        "summary.json",
        "scatter_gan.csv",
    ] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn shuffled_labels_sit_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(&tmp.path().join("data"), 100, 6, None);
    let mut cfg = evaluate_cfg(tmp.path(), "e", &data, &[Method::Baseline]);
    cfg.evaluate.shuffle_labels = true;
    cfg.evaluate.folds = 10;
    let out = run(Command::Evaluate, cfg.clone()).unwrap();
    let acc = summary(&out)["mean_metrics"]["baseline"]["accuracy"]
        .as_f64()
        .unwrap();
    // Permutation null: accuracy ~ Binomial(200, 0.5)/200, sd ~0.035.
    assert!(
        (acc - 0.5).abs() < 3.0 * (0.25f64 / 200.0).sqrt() + 0.02,
        "{acc}"
    );

    cfg.evaluate.shuffle_labels = false;
    cfg.out = Some(tmp.path().join("unshuffled"));
    let out = run(Command::Evaluate, cfg).unwrap();
    assert!(
        summary(&out)["mean_metrics"]["baseline"]["accuracy"]
            .as_f64()
            .unwrap()
            > 0.95
    );
}

#[test]
fn evaluate_needs_enough_examples_per_class() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(&tmp.path().join("data"), 3, 3, None);
    let cfg = evaluate_cfg(tmp.path(), "e", &data, &[Method::Baseline]);
    assert!(run(Command::Evaluate, cfg).is_err());
}

#[test]
fn content_target_uses_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(&tmp.path().join("data"), 30, 3, None);
    let mut cfg = evaluate_cfg(tmp.path(), "e", &data, &[Method::Baseline]);
    cfg.evaluate.target = LabelTarget::Content;
    let out = run(Command::Evaluate, cfg).unwrap();
    assert_eq!(summary(&out)["target"], "content");
}

#[test]
fn reconstruction_extremes_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = phantoms(&tmp.path().join("data"), 8, 5, None);
    let mut lin = base(&tmp.path().join("lin"), 5);
    lin.correct.data = Some(data.clone());
    lin.correct.reference_controls = "paired_a".into();
    lin.correct.site_controls = "paired_b".into();
    lin.correct.sets = vec!["paired_b".into()];
    let lin = run(Command::Correct, lin).unwrap();

    let mut cfg = base(&tmp.path().join("rec"), 5);
    cfg.reconstruct.reference = Some(SetRef {
        data: data.clone(),
        set: "paired_a".into(),
    });
    cfg.reconstruct.baseline = Some(SetRef {
        data: data.clone(),
        set: "paired_b".into(),
    });
    cfg.reconstruct.corrected = vec![
        CorrectedRef {
            method: Method::Gan,
            data: data.clone(),
            set: "paired_a".into(),
        },
        CorrectedRef {
            method: Method::Gp,
            data: data.clone(),
            set: "paired_b".into(),
        },
        CorrectedRef {
            method: Method::Linear,
            data: lin,
            set: "paired_b".into(),
        },
    ];
    let out = run(Command::Reconstruct, cfg.clone()).unwrap();
    let s = summary(&out);
    assert_eq!(
        s["methods"]["gan"]["mean_decrease_pct"].as_f64().unwrap(),
        100.0
    );
    assert_eq!(
        s["methods"]["gp"]["mean_decrease_pct"].as_f64().unwrap(),
        0.0
    );
    assert!(s["methods"]["linear"]["mean_decrease_pct"]
        .as_f64()
        .unwrap()
        .is_finite());
    let csv = std::fs::read_to_string(out.join("reconstruction.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 8);

    let mut rep = base(&tmp.path().join("report"), 5);
    rep.report.runs = vec![data.clone(), out.clone()];
    let r = run(Command::Report, rep.clone()).unwrap();
    let text = std::fs::read_to_string(r.join("report.csv")).unwrap();
    assert!(text.contains("methods.linear.mean_decrease_pct"));

    // Tampering with a recorded output is caught.
    std::fs::write(out.join("reconstruction.csv"), "method,id\n").unwrap();
    rep.out = Some(tmp.path().join("report2"));
    assert!(run(Command::Report, rep).is_err());
}

#[test]
fn unpaired_reconstruction_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut s = base(&tmp.path().join("digits"), 1);
    s.simulate.mode = SimulateMode::Box1;
    s.simulate.box1.source = DigitSource::Synthetic;
    s.simulate.box1.train_images = Some(20);
    s.simulate.box1.test_images = Some(20);
    let data = run(Command::Simulate, s).unwrap();
    let mut cfg = base(&tmp.path().join("rec"), 1);
    cfg.reconstruct.reference = Some(SetRef {
        data: data.clone(),
        set: "test_a".into(),
    });
    cfg.reconstruct.baseline = Some(SetRef {
        data: data.clone(),
        set: "test_b".into(),
    });
    cfg.reconstruct.corrected = vec![CorrectedRef {
        method: Method::Gan,
        data,
        set: "test_b".into(),
    }];
    let err = format!("{:#}", run(Command::Reconstruct, cfg).unwrap_err());
    assert!(err.contains("paired"), "{err}");
}

#[test]
fn config_rejects_unknown_keys_and_versions() {
    assert!(RunConfig::from_json(r#"{"seed": 1, "sed": 2}"#).is_err());
    assert!(RunConfig::from_json(r#"{"train": {"bach_size": 2}}"#).is_err());
    assert!(RunConfig::from_json(r#"{"schema_version": 2}"#).is_err());
    let cfg = RunConfig::from_json(r#"{"seed": 4, "train": {"batch_size": 2}}"#).unwrap();
    assert_eq!((cfg.seed, cfg.train.batch_size), (4, 2));
}

#[test]
fn snapshot_round_trips_as_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = phantoms(tmp.path(), 2, 9, None);
    let snap = RunConfig::load(&out.join("resolved_config.json")).unwrap();
    assert_eq!(snap.seed, 9);
    assert!(snap.simulate.phantom.site_b.is_some());
}

#[test]
fn binary_flags_override_config_and_failures_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        r#"{"seed": 1, "out": "ignored", "simulate": {"phantom": {"subjects": 3, "size": 16}}}"#,
    )
    .unwrap();
    let out = tmp.path().join("flagged");
    let status = Proc::new(env!("CARGO_BIN_EXE_harmonize"))
        .args(["simulate", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "42", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let snap = RunConfig::load(&out.join("resolved_config.json")).unwrap();
    assert_eq!(snap.seed, 42);
    assert!(out.join("paired_a.ntn").is_file());

    let bad = Proc::new(env!("CARGO_BIN_EXE_harmonize"))
        .args(["train", "--out"])
        .arg(tmp.path().join("nope"))
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("train.data"));
}
