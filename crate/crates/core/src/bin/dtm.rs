use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dtm_core::data::{self, embed_dataset, parse_mutation, read_bundles, synth_dataset, write_bundles, SynthDatasetConfig, TrackSet};
use dtm_core::gradcheck::{self, GradcheckConfig};
use dtm_core::heads::{Architecture, ProjectionMode};
use dtm_core::run::{self, read_text, write_file, RunManifest};
use dtm_core::splitter::{self, clusters_from_tsv, proteins_from_records, split_clusters, SplitAssignment, SplitRatio, DEFAULT_IDENTITY, DEFAULT_KMER};
use dtm_core::trainer::{self, Checkpoint, TrainConfig, Trainer};
use dtm_core::{Error, Result};

/// Melting-temperature change prediction from precomputed embeddings.
#[derive(Parser)]
#[command(name = "dtm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster proteins by sequence identity and split clusters into train/val.
    PrepareSplit(PrepareSplit),
    /// Generate a synthetic labeled mutation dataset.
    SynthDataset(SynthDatasetArgs),
    /// Write deterministic synthetic embedding bundles for a dataset.
    SynthEmbed(SynthEmbed),
    /// Train a model and write a run directory.
    Train(Train),
    /// Score one or more checkpoints on a dataset.
    Eval(Eval),
    /// Predict for a list of mutations.
    Predict(Predict),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct PrepareSplit {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IDENTITY)]
    identity: f64,
    #[arg(long, default_value = "8:2")]
    ratio: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_KMER)]
    kmer: usize,
    /// Precomputed clusters (`representative<TAB>member` rows) used instead
    /// of the built-in clustering.
    #[arg(long)]
    clusters: Option<PathBuf>,
}

#[derive(Args)]
struct SynthDatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    proteins: usize,
    #[arg(long, default_value_t = 5)]
    mutations_per_protein: usize,
    #[arg(long, default_value_t = 40)]
    min_len: usize,
    #[arg(long, default_value_t = 120)]
    max_len: usize,
    #[arg(long, default_value_t = 0.2)]
    homolog_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    label_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthEmbed {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    d_raw: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `seq` or `seq+struct`.
    #[arg(long, default_value = "seq")]
    tracks: String,
}

/// Flags that override the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `ensemble` or a single head name.
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    tracks: Option<String>,
    #[arg(long)]
    d_proj: Option<usize>,
    #[arg(long)]
    projection: Option<String>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    bundles: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// TOML training config. Flags win over file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: PathBuf,
    /// Train on train and validation proteins together.
    #[arg(long)]
    final_retrain: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Eval {
    /// Repeat to average several checkpoints.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    bundles: PathBuf,
    /// Restrict to one side of a split manifest.
    #[arg(long, requires = "side")]
    split: Option<PathBuf>,
    #[arg(long, value_parser = ["train", "val"], requires = "split")]
    side: Option<String>,
    /// Per-sample predictions CSV.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Report file; stdout always gets a copy.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Predict {
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    bundles: PathBuf,
    /// CSV with `protein_id,mutation` columns.
    #[arg(long)]
    mutations: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    /// `ensemble` or a single head name.
    #[arg(long, default_value = "ensemble")]
    head: String,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "seq")]
    tracks: String,
    #[arg(long, default_value_t = 4)]
    samples: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PrepareSplit(a) => prepare_split(a),
        Command::SynthDataset(a) => synth_dataset_cmd(a),
        Command::SynthEmbed(a) => synth_embed(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn write_with_manifest(out: &Path, bytes: &[u8], mut manifest: RunManifest) -> Result<()> {
    write_file(out, bytes)?;
    manifest.output(out)?;
    manifest.write(&RunManifest::sidecar_path(out))
}

fn prepare_split(a: PrepareSplit) -> Result<()> {
    let ratio: SplitRatio = a.ratio.parse()?;
    if !(a.identity > 0.0 && a.identity <= 1.0) {
        return Err(Error::config("--identity must lie in (0, 1]"));
    }
    let records = data::load_dataset(&a.dataset)?;
    let proteins = proteins_from_records(&records);
    let mut manifest = RunManifest::new("prepare-split");
    manifest.input(&a.dataset)?;
    let clusters = match &a.clusters {
        Some(p) => {
            manifest.input(p)?;
            clusters_from_tsv(&read_text(p)?)?
        }
        None => splitter::greedy_cluster(&proteins, a.identity, a.kmer)?,
    };
    let split = split_clusters(&clusters, &proteins, ratio, a.seed, a.identity)?;
    let (train, val) = splitter::partition_records(&records, &split)?;
    eprintln!(
        "{} clusters, {} train / {} val mutations",
        clusters.len(),
        train.len(),
        val.len()
    );
    write_with_manifest(&a.out, split.to_manifest().as_bytes(), manifest)
}

fn synth_dataset_cmd(a: SynthDatasetArgs) -> Result<()> {
    let cfg = SynthDatasetConfig {
        proteins: a.proteins,
        mutations_per_protein: a.mutations_per_protein,
        min_len: a.min_len,
        max_len: a.max_len,
        homolog_fraction: a.homolog_fraction,
        label_noise: a.label_noise,
        seed: a.seed,
    };
    let records = synth_dataset(&cfg)?;
    data::write_dataset(&a.out, &records)?;
    let mut manifest = RunManifest::new("synth-dataset");
    manifest.output(&a.out)?;
    manifest.write(&RunManifest::sidecar_path(&a.out))
}

fn synth_embed(a: SynthEmbed) -> Result<()> {
    let tracks: TrackSet = a.tracks.parse()?;
    if a.d_raw == 0 {
        return Err(Error::config("--d-raw must be positive"));
    }
    let records = data::load_dataset(&a.dataset)?;
    let bundles = embed_dataset(&records, tracks, a.d_raw, a.seed)?;
    write_bundles(&a.out, &bundles)?;
    let mut manifest = RunManifest::new("synth-embed");
    manifest.input(&a.dataset)?;
    manifest.output(&a.out)?;
    eprintln!("wrote {} bundles", bundles.len());
    manifest.write(&RunManifest::sidecar_path(&a.out))
}

fn apply_overrides(cfg: &mut TrainConfig, o: &Overrides) -> Result<()> {
    if let Some(v) = o.max_lr {
        cfg.max_lr = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.clip_norm {
        cfg.clip_norm = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = &o.head {
        cfg.architecture = v.parse()?;
    }
    if let Some(v) = &o.tracks {
        cfg.tracks = v.parse()?;
    }
    if let Some(v) = o.d_proj {
        cfg.d_proj = v;
    }
    if let Some(v) = &o.projection {
        cfg.projection = match v.as_str() {
            "learned" => ProjectionMode::Learned,
            "identity" => ProjectionMode::Identity,
            _ => return Err(Error::config(format!("unknown projection '{v}', expected learned or identity"))),
        };
    }
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, &a.overrides)?;
    cfg.validate()?;

    let records = data::load_dataset(&a.dataset)?;
    let bundles = read_bundles(&a.bundles)?;
    let split_text = read_text(&a.split)?;
    let split = SplitAssignment::from_manifest(&split_text)?;
    let (mut train_set, mut val_set) = splitter::partition_records(&records, &split)?;
    if a.final_retrain {
        train_set.append(&mut val_set);
    }

    let mut manifest = RunManifest::new(if a.final_retrain { "train --final-retrain" } else { "train" });
    manifest.input(&a.dataset)?.input(&a.bundles)?.input(&a.split)?;
    if let Some(p) = &a.config {
        manifest.input(p)?;
    }

    let mut trainer = match &a.resume {
        Some(p) => {
            manifest.input(p)?;
            let ck = Checkpoint::load(p)?;
            if ck.config != cfg {
                log::warn!("resuming with the checkpoint's config; file and flag settings are ignored");
            }
            Trainer::resume(ck, &train_set, &val_set, &bundles)?
        }
        None => Trainer::new(cfg, &train_set, &val_set, &bundles)?,
    };
    let cfg = trainer.config().clone();
    manifest.config_hash = Some(cfg.hash());

    let dir = &a.run_dir;
    write_file(&dir.join(run::CONFIG_FILE), cfg.to_toml().as_bytes())?;
    write_file(&dir.join(run::SPLIT_FILE), split_text.as_bytes())?;
    let history = trainer.run()?;
    let history_path = dir.join(run::HISTORY_FILE);
    let mut history_text = match &a.resume {
        Some(_) => std::fs::read_to_string(&history_path).unwrap_or_default(),
        None => String::new(),
    };
    history_text.push_str(&history.to_jsonl());
    write_file(&history_path, history_text.as_bytes())?;
    let ck = trainer.checkpoint();
    ck.save(dir.join(run::CHECKPOINT_FILE))?;

    let model = ck.model()?;
    let (label, eval_set) = if val_set.is_empty() { ("train", &train_set) } else { ("val", &val_set) };
    let report = match trainer::evaluate(&model, eval_set, &bundles) {
        Ok(ev) => format!("set={label}\n{}", ev.report()),
        Err(e) => format!("set={label}\nerror: {e}\n"),
    };
    write_file(&dir.join(run::EVAL_FILE), report.as_bytes())?;
    print!("{report}");

    for f in [run::CONFIG_FILE, run::SPLIT_FILE, run::HISTORY_FILE, run::CHECKPOINT_FILE, run::EVAL_FILE] {
        manifest.output(&dir.join(f))?;
    }
    manifest.write(&dir.join(run::MANIFEST_FILE))
}

fn load_models(paths: &[PathBuf], manifest: &mut RunManifest) -> Result<Vec<dtm_core::heads::Model>> {
    paths
        .iter()
        .map(|p| {
            manifest.input(p)?;
            Checkpoint::load(p)?.model()
        })
        .collect()
}

fn eval(a: Eval) -> Result<()> {
    let mut manifest = RunManifest::new("eval");
    let models = load_models(&a.checkpoint, &mut manifest)?;
    let mut records = data::load_dataset(&a.dataset)?;
    let bundles = read_bundles(&a.bundles)?;
    manifest.input(&a.dataset)?.input(&a.bundles)?;
    if let (Some(p), Some(side)) = (&a.split, &a.side) {
        manifest.input(p)?;
        let split = SplitAssignment::from_manifest(&read_text(p)?)?;
        let (train, val) = splitter::partition_records(&records, &split)?;
        records = if side == "train" { train } else { val };
    }
    let refs: Vec<_> = models.iter().collect();
    let ev = trainer::evaluate_models(&refs, &records, &bundles)?;
    for s in &ev.skipped {
        eprintln!("skipped {s}");
    }
    let report = ev.report();
    print!("{report}");
    if let Some(p) = &a.predictions {
        write_file(p, ev.predictions_csv().as_bytes())?;
        manifest.output(p)?;
    }
    if let Some(p) = &a.report {
        write_with_manifest(p, report.as_bytes(), manifest)?;
    }
    Ok(())
}

fn predict(a: Predict) -> Result<()> {
    let mut manifest = RunManifest::new("predict");
    let models = load_models(&a.checkpoint, &mut manifest)?;
    let bundles = read_bundles(&a.bundles)?;
    manifest.input(&a.bundles)?.input(&a.mutations)?;
    let file = std::fs::File::open(&a.mutations).map_err(|e| Error::io(&a.mutations, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers().map_err(|e| Error::data(format!("mutation list: {e}")))?.clone();
    if headers.len() < 2 || &headers[0] != "protein_id" || &headers[1] != "mutation" {
        return Err(Error::data("mutation list header must start with protein_id,mutation"));
    }
    let n_heads = models[0].heads().len();
    let mut out = String::from("protein_id,mutation");
    for i in 1..=n_heads {
        out.push_str(&format!(",y{i}"));
    }
    out.push_str(",y_ens\n");
    for row in rdr.records() {
        let row = row.map_err(|e| Error::data(format!("mutation list: {e}")))?;
        let line = row.position().map_or(0, |p| p.line());
        let pid = &row[0];
        let m = parse_mutation(&row[1]).map_err(|e| Error::data(format!("line {line}: {e}")))?;
        let wt_id = data::wt_variant_id(pid, m.position());
        let mt_id = data::mut_variant_id(pid, &m);
        let find = |id: &str| bundles.get(id).ok_or_else(|| Error::data(format!("line {line}: no bundle for variant '{id}'")));
        let (wt, mt) = (find(&wt_id)?, find(&mt_id)?);
        let mut heads = vec![0.0; n_heads];
        let mut y = 0.0;
        for model in &models {
            let p = model.predict(wt, mt)?;
            for (acc, h) in heads.iter_mut().zip(&p.heads) {
                *acc += h;
            }
            y += p.ensemble;
        }
        let k = models.len() as f64;
        out.push_str(&format!("{pid},{m}"));
        for h in heads {
            out.push_str(&format!(",{}", h / k));
        }
        out.push_str(&format!(",{}\n", y / k));
    }
    match &a.out {
        Some(p) => write_with_manifest(p, out.as_bytes(), manifest),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn gradcheck_cmd(a: Gradcheck) -> Result<()> {
    let architecture: Architecture = a.head.parse()?;
    if a.d == 0 || a.samples == 0 {
        return Err(Error::config("--d and --samples must be positive"));
    }
    let cfg = GradcheckConfig {
        architecture,
        tracks: a.tracks.parse()?,
        d: a.d,
        samples: a.samples,
        seed: a.seed,
        ..Default::default()
    };
    let r = gradcheck::run(&cfg)?;
    println!(
        "head={} d={} seed={} entries={} max_rel_err={:e} abs_err={:e} worst={}[{}] analytic={:e} numeric={:e}",
        architecture, a.d, a.seed, r.entries, r.max_rel_err, r.worst_abs_err, r.worst_param, r.worst_index, r.analytic, r.numeric
    );
    if r.max_rel_err >= 1e-4 {
        return Err(Error::numeric(format!(
            "gradient check failed: relative error {:e} at {}[{}]",
            r.max_rel_err, r.worst_param, r.worst_index
        )));
    }
    println!("pass");
    Ok(())
}
