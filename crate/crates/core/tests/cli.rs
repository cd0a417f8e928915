use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dtm_core::data::{self, write_bundles, BundleSet, EmbeddingBundle, MutationRecord, TrackRole};
use dtm_core::heads::{Architecture, HeadKind, Model, ProjectionMode};
use dtm_core::optim::AdamState;
use dtm_core::run::RunManifest;
use dtm_core::trainer::{Checkpoint, TrainConfig};

fn dtm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtm"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dtm(args);
    assert!(
        out.status.success(),
        "dtm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Synthetic dataset, bundles and split, all through the CLI.
    fn pipeline(&self, proteins: &str) -> (PathBuf, PathBuf, PathBuf) {
        let (d, e, s) = (self.path("d.csv"), self.path("e.dtme"), self.path("split.tsv"));
        ok(&["synth-dataset", "--out", p(&d), "--proteins", proteins, "--mutations-per-protein", "3", "--min-len", "30", "--max-len", "50", "--seed", "4"]);
        ok(&["synth-embed", "--dataset", p(&d), "--out", p(&e), "--d-raw", "8", "--seed", "1"]);
        ok(&["prepare-split", "--dataset", p(&d), "--out", p(&s), "--seed", "2"]);
        (d, e, s)
    }
}

#[test]
fn prepare_split_partitions_and_is_deterministic() {
    let ws = Workspace::new();
    let (d, _, s) = ws.pipeline("10");
    let text = std::fs::read_to_string(&s).unwrap();
    assert!(text.lines().any(|l| l.contains("\ttrain\t")));
    assert!(text.lines().any(|l| l.contains("\tval\t")));
    assert_eq!(text.lines().filter(|l| l.starts_with("SYN")).count(), 10);

    let again = ws.path("again.tsv");
    ok(&["prepare-split", "--dataset", p(&d), "--out", p(&again), "--seed", "2"]);
    assert_eq!(std::fs::read(&s).unwrap(), std::fs::read(&again).unwrap());
    assert!(RunManifest::sidecar_path(&again).exists());

    let bad = dtm(&["prepare-split", "--dataset", p(&d), "--out", p(&ws.path("x.tsv")), "--ratio", "0:10"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn prepare_split_accepts_precomputed_clusters() {
    let ws = Workspace::new();
    let (d, _, _) = ws.pipeline("4");
    let clusters = ws.path("clusters.tsv");
    std::fs::write(&clusters, "SYN0000\tSYN0000\nSYN0000\tSYN0001\nSYN0002\tSYN0002\nSYN0003\tSYN0003\n").unwrap();
    let out = ws.path("s.tsv");
    ok(&["prepare-split", "--dataset", p(&d), "--out", p(&out), "--clusters", p(&clusters)]);
    let split = dtm_core::splitter::SplitAssignment::from_manifest(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(split.side("SYN0000"), split.side("SYN0001"));
}

#[test]
fn synth_embed_writes_one_bundle_per_variant() {
    let ws = Workspace::new();
    let d = ws.path("d.csv");
    // Two mutations of P1 at different sites and one of P2: three mutant
    // bundles plus three wild-type bundles.
    std::fs::write(&d, "protein_id,wt_sequence,mutation,dtm\nP1,MKILVAG,K2E,1.0\nP1,MKILVAG,V5A,-0.5\nP2,ACDEFG,D3N,0.25\n").unwrap();
    let e = ws.path("e.dtme");
    ok(&["synth-embed", "--dataset", p(&d), "--out", p(&e), "--d-raw", "4", "--tracks", "seq"]);
    let bundles = data::read_bundles(&e).unwrap();
    assert_eq!(bundles.len(), 6);
    assert!(bundles.contains_key("P1:WT@2") && bundles.contains_key("P2:D3N"));

    let e2 = ws.path("e2.dtme");
    ok(&["synth-embed", "--dataset", p(&d), "--out", p(&e2), "--d-raw", "4", "--tracks", "seq"]);
    assert_eq!(std::fs::read(&e).unwrap(), std::fs::read(&e2).unwrap());

    let bad = dtm(&["synth-embed", "--dataset", p(&d), "--out", p(&e2), "--d-raw", "0"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = dtm(&["synth-embed", "--dataset", p(&d), "--out", p(&e2), "--tracks", "struct"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_for_head1() {
    let out = ok(&["gradcheck", "--head", "head1", "--d", "8"]);
    let err: f64 = out
        .split_whitespace()
        .find_map(|w| w.strip_prefix("max_rel_err="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(err < 1e-4, "{out}");
    assert!(out.contains("worst="));
    assert_eq!(dtm(&["gradcheck", "--head", "head9"]).status.code(), Some(2));
}

#[test]
fn train_writes_reproducible_run_directory() {
    let ws = Workspace::new();
    let (d, e, s) = ws.pipeline("10");
    let cfg = ws.path("cfg.toml");
    std::fs::write(&cfg, "epochs = 2\nbatch_size = 4\nd_proj = 4\nmax_lr = 0.5\n").unwrap();
    let run = |dir: &Path| {
        ok(&[
            "train", "--dataset", p(&d), "--bundles", p(&e), "--split", p(&s), "--config", p(&cfg),
            "--run-dir", p(dir), "--max-lr", "0.01", "--epochs", "3",
        ])
    };
    let (r1, r2) = (ws.path("run1"), ws.path("run2"));
    let printed = run(&r1);
    run(&r2);
    assert!(printed.contains("r(↑)") && printed.contains("mae="));
    for f in ["config.toml", "split.tsv", "history.jsonl", "checkpoint.json", "eval.txt", "manifest.json"] {
        assert!(r1.join(f).exists(), "{f}");
        if f != "manifest.json" {
            assert_eq!(std::fs::read(r1.join(f)).unwrap(), std::fs::read(r2.join(f)).unwrap(), "{f}");
        }
    }
    let effective = TrainConfig::from_toml(&std::fs::read_to_string(r1.join("config.toml")).unwrap()).unwrap();
    assert_eq!((effective.max_lr, effective.epochs, effective.d_proj), (0.01, 3, 4));
    assert_eq!(std::fs::read_to_string(r1.join("history.jsonl")).unwrap().lines().count(), 3);

    // Evaluating the saved checkpoint on the validation side reproduces the run's report.
    let report = ok(&[
        "eval", "--checkpoint", p(&r1.join("checkpoint.json")), "--dataset", p(&d), "--bundles", p(&e),
        "--split", p(&s), "--side", "val",
    ]);
    assert_eq!(format!("set=val\n{report}"), std::fs::read_to_string(r1.join("eval.txt")).unwrap());

    // A split manifest missing a protein is a data error.
    let partial = ws.path("partial.tsv");
    let text = std::fs::read_to_string(&s).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("SYN0003")).collect();
    std::fs::write(&partial, kept.join("\n") + "\n").unwrap();
    let bad = dtm(&["train", "--dataset", p(&d), "--bundles", p(&e), "--split", p(&partial), "--run-dir", p(&ws.path("r3"))]);
    assert_eq!(bad.status.code(), Some(3));
}

/// A MutConcat model with identity projection whose output is the first
/// wild-type position coordinate.
fn echo_checkpoint(path: &Path) {
    let cfg = TrainConfig {
        architecture: Architecture::Single(HeadKind::MutConcat),
        projection: ProjectionMode::Identity,
        ..Default::default()
    };
    let mut model = Model::new(cfg.model_spec(2), 0).unwrap();
    let w = model.params().find("mut-concat.out.w").unwrap();
    model.params_mut().get_mut(w).data = vec![1.0, 0.0, 0.0, 0.0];
    let adam = AdamState::new(model.params(), cfg.adam);
    Checkpoint::new(&cfg, &model, &adam, 0, 0).save(path).unwrap();
}

fn echo_fixture(ws: &Workspace) -> (PathBuf, PathBuf, Vec<MutationRecord>) {
    let d = ws.path("d.csv");
    std::fs::write(&d, "protein_id,wt_sequence,mutation,dtm\nA,MKIL,K2E,1.5\nB,MKIL,I3V,-2.25\nC,MKIL,L4A,4\n").unwrap();
    let records = data::load_dataset(&d).unwrap();
    let mut bundles = BundleSet::new();
    for r in &records {
        let make = |id: String, first: f32| {
            [TrackRole::SeqCls, TrackRole::SeqPos, TrackRole::Avg]
                .into_iter()
                .fold(EmbeddingBundle::new(id), |b, role| b.with_track(role, vec![first, 0.5]))
        };
        bundles.insert(r.wt_variant_id(), make(r.wt_variant_id(), r.dtm as f32));
        bundles.insert(r.mut_variant_id(), make(r.mut_variant_id(), 0.0));
    }
    let e = ws.path("e.dtme");
    write_bundles(&e, &bundles).unwrap();
    (d, e, records)
}

#[test]
fn eval_reports_perfect_correlation_when_predictions_equal_labels() {
    let ws = Workspace::new();
    let (d, e, _) = echo_fixture(&ws);
    let ck = ws.path("ck.json");
    echo_checkpoint(&ck);
    let preds = ws.path("preds.csv");
    let out = ok(&["eval", "--checkpoint", p(&ck), "--dataset", p(&d), "--bundles", p(&e), "--predictions", p(&preds)]);
    let r: f64 = out.split_whitespace().find_map(|w| w.strip_prefix("r=")).unwrap().parse().unwrap();
    assert!((r - 1.0).abs() < 1e-12, "{out}");
    assert!(out.contains("mae=0 rmse=0 n=3"), "{out}");
    assert!(out.contains("  1.0000   0.0000   0.0000"), "{out}");
    let csv = std::fs::read_to_string(&preds).unwrap();
    assert!(csv.contains("A,K2E,1.5,1.5,1.5"), "{csv}");
}

#[test]
fn predict_names_variant_missing_its_bundle() {
    let ws = Workspace::new();
    let (_, e, _) = echo_fixture(&ws);
    let ck = ws.path("ck.json");
    echo_checkpoint(&ck);
    let list = ws.path("list.csv");
    std::fs::write(&list, "protein_id,mutation\nA,K2E\nB,I3V\n").unwrap();
    let out = ok(&["predict", "--checkpoint", p(&ck), "--bundles", p(&e), "--mutations", p(&list)]);
    assert_eq!(out, "protein_id,mutation,y1,y_ens\nA,K2E,1.5,1.5\nB,I3V,-2.25,-2.25\n");

    std::fs::write(&list, "protein_id,mutation\nA,K2E\nB,I3W\n").unwrap();
    let bad = dtm(&["predict", "--checkpoint", p(&ck), "--bundles", p(&e), "--mutations", p(&list)]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("B:I3W"));
}

#[test]
fn missing_input_file_is_io_error() {
    let out = dtm(&["synth-embed", "--dataset", "/nonexistent/d.csv", "--out", "/tmp/never.dtme"]);
    assert_eq!(out.status.code(), Some(5));
}
