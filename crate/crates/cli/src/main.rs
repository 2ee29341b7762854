use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use crowdtsc::annotation::{build_tasks, Oracle};
use crowdtsc::clustering::{ClusterMethod, Metric};
use crowdtsc::corpus::{load_corpus, read_sample, Split, Vocabulary};
use crowdtsc::embeddings::load_pretrained;
use crowdtsc::kea::KeywordSets;
use crowdtsc::models::{read_checkpoint, ModelKind};
use crowdtsc::pipeline::{artifacts, predict_texts, sweep_table, AnnotationSource, Manifest, PipelineConfig, Stage, Table};
use crowdtsc::synthetic::{generate, SyntheticConfig};
use crowdtsc::trainer::{Ablation, Optimizer};
use crowdtsc::AnnotationService;

#[derive(Parser)]
#[command(name = "crowdtsc", version, about = "Crowd-guided keyword expansion and keyword-aware text classification")]
struct Cli {
    /// Pipeline manifest; created by `ingest`.
    #[arg(long, global = true, default_value = "crowdtsc.json")]
    manifest: PathBuf,
    /// Seed for sampling, simulation, clustering, initialisation and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the corpora, build the vocabulary and the embedding table.
    Ingest(IngestArgs),
    /// Draw the random sample of training texts to annotate.
    Sample {
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Serve the sample to human annotators over HTTP.
    ServeAnnotation(ServeArgs),
    /// Annotate the sample with a machine oracle.
    SimulateAnnotations {
        #[arg(long, default_value = "tfidf")]
        oracle: String,
    },
    /// Cluster the embedding space.
    Cluster(ClusterArgs),
    /// Expand the crowd seeds through the clusters.
    Expand,
    /// Train the classifier.
    Train(TrainArgs),
    /// Evaluate the trained checkpoint on the test split.
    Eval,
    /// Compare keyword variants over several seeds.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "full,N,T,NC")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Accuracy against the number of keyword slots.
    SweepFcn {
        #[arg(long = "s", value_delimiter = ',', default_value = "5,10,15,20,25")]
        values: Vec<usize>,
    },
    /// Classify texts with a checkpoint.
    Predict {
        /// Defaults to the manifest's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        text: Vec<String>,
        /// One text per line.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run every stage, skipping those already up to date.
    Run,
    /// Show which stages are up to date.
    Status,
    /// Write a synthetic corpus and matching word vectors.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    /// GloVe-style vectors; random initialisation without them.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    min_freq: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Sample id file; defaults to the manifest's.
    #[arg(long)]
    sample_file: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Record log; defaults to `annotation_log.jsonl` in the work directory.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Built annotator UI to serve at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    method: Option<ClusterMethod>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    cosine: bool,
    /// Number of most frequent tokens to cluster.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// 0 disables early stopping.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    slots: Option<usize>,
    #[arg(long)]
    fine_tune: Option<bool>,
    /// Checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    train_docs: usize,
    #[arg(long, default_value_t = 400)]
    test_docs: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 40)]
    indicators: usize,
    #[arg(long, default_value_t = 12)]
    min_len: usize,
    #[arg(long, default_value_t = 24)]
    max_len: usize,
    #[arg(long, default_value_t = 0.5)]
    separation: f64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load_manifest(cli: &Cli) -> Result<Manifest> {
    let mut m = Manifest::load(&cli.manifest)
        .with_context(|| format!("cannot read manifest {} (run `ingest` first)", cli.manifest.display()))?;
    if let Some(s) = cli.seed {
        m.config.seed = s;
    }
    Ok(m)
}

fn emit(m: &Manifest, name: &str, t: &Table) -> Result<()> {
    print!("{}", t.to_text());
    std::fs::create_dir_all(m.work_dir())?;
    std::fs::write(m.work_dir().join(format!("{name}.txt")), t.to_text())?;
    std::fs::write(m.work_dir().join(format!("{name}.csv")), t.to_csv()?)?;
    Ok(())
}

fn stage(m: &mut Manifest, s: Stage) -> Result<()> {
    let status = m.run_stage(s)?;
    println!("{s}: {status}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Ingest(a) => {
            let mut m = if cli.manifest.exists() {
                load_manifest(&cli)?
            } else {
                let (Some(train), Some(test), Some(classes)) = (&a.train, &a.test, a.classes) else {
                    bail!("a new manifest needs --train, --test and --classes");
                };
                let mut m = Manifest::new(&cli.manifest, PipelineConfig::new(train.clone(), test.clone(), classes));
                m.config.seed = cli.seed.unwrap_or(0);
                m
            };
            let c = &mut m.config;
            // paths given here are relative to the working directory
            if let Some(v) = &a.train {
                c.train_corpus = std::path::absolute(v)?;
            }
            if let Some(v) = &a.test {
                c.test_corpus = std::path::absolute(v)?;
            }
            if let Some(v) = a.classes {
                c.num_classes = v;
            }
            if let Some(v) = &a.embeddings {
                c.embeddings = Some(std::path::absolute(v)?);
            }
            if let Some(v) = a.dim {
                c.embed_dim = v;
            }
            if let Some(v) = a.min_freq {
                c.min_freq = v;
            }
            if let Some(v) = a.max_len {
                c.max_len = v;
            }
            if let Some(v) = &a.work_dir {
                c.work_dir = v.clone();
            }
            m.save()?;
            stage(&mut m, Stage::Ingest)
        }
        Command::Sample { ratio } => {
            let mut m = load_manifest(&cli)?;
            if let Some(r) = ratio {
                m.config.sample_ratio = *r;
            }
            stage(&mut m, Stage::Sample)
        }
        Command::ServeAnnotation(a) => serve(&cli, a),
        Command::SimulateAnnotations { oracle } => {
            let mut m = load_manifest(&cli)?;
            m.config.annotations = AnnotationSource::Simulate {
                oracle: oracle.parse::<Oracle>()?,
            };
            stage(&mut m, Stage::Annotate)
        }
        Command::Cluster(a) => {
            let mut m = load_manifest(&cli)?;
            let c = &mut m.config.cluster;
            if let Some(v) = a.method {
                c.method = v;
            }
            if a.k.is_some() {
                c.k = a.k;
            }
            if a.eps.is_some() {
                c.eps = a.eps;
            }
            if let Some(v) = a.min_pts {
                c.min_pts = v;
            }
            if a.bandwidth.is_some() {
                c.bandwidth = a.bandwidth;
            }
            if a.cosine {
                c.metric = Metric::Cosine;
            }
            if let Some(v) = a.limit {
                m.config.cluster_limit = v;
            }
            stage(&mut m, Stage::Cluster)
        }
        Command::Expand => stage(&mut load_manifest(&cli)?, Stage::Expand),
        Command::Train(a) => {
            let mut m = load_manifest(&cli)?;
            apply_train_args(&mut m.config, a)?;
            stage(&mut m, Stage::Train)?;
            print!("{}", m.report()?);
            Ok(())
        }
        Command::Eval => {
            let mut m = load_manifest(&cli)?;
            stage(&mut m, Stage::Eval)?;
            print!("{}", std::fs::read_to_string(m.artifact(artifacts::EVAL_TEXT))?);
            Ok(())
        }
        Command::Ablate { variants, seeds } => {
            let m = load_manifest(&cli)?;
            let variants = variants
                .iter()
                .map(|v| v.parse::<Ablation>())
                .collect::<crowdtsc::Result<Vec<_>>>()?;
            let result = m.ablate(&variants, seeds)?;
            emit(&m, "ablation", &result.table())
        }
        Command::SweepFcn { values } => {
            let m = load_manifest(&cli)?;
            let rows = m.sweep_fcn_length(values)?;
            emit(&m, "sweep_fcn", &sweep_table(&rows))
        }
        Command::Predict {
            checkpoint,
            text,
            input,
        } => predict(&cli, checkpoint.as_deref(), text, input.as_deref()),
        Command::Run => {
            let mut m = load_manifest(&cli)?;
            for (s, status) in m.run_all()? {
                println!("{s}: {status}");
            }
            print!("{}", std::fs::read_to_string(m.artifact(artifacts::EVAL_TEXT))?);
            Ok(())
        }
        Command::Status => {
            let m = load_manifest(&cli)?;
            for s in Stage::ALL {
                let state = if m.is_fresh(s).unwrap_or(false) {
                    "up to date"
                } else if m.stages.contains_key(&s) {
                    "stale"
                } else {
                    "not run"
                };
                println!("{s:<9} {state}");
            }
            Ok(())
        }
        Command::MakeSynthetic(a) => {
            let cfg = SyntheticConfig {
                train_docs: a.train_docs,
                test_docs: a.test_docs,
                label_noise: a.noise,
                indicators_per_class: a.indicators,
                min_len: a.min_len,
                max_len: a.max_len,
                class_separation: a.separation,
                seed: cli.seed.unwrap_or(0),
                ..Default::default()
            };
            let syn = generate(&cfg)?;
            syn.write_to(&a.out)?;
            println!(
                "wrote {} training and {} test documents with {}-dimensional vectors to {}",
                syn.train.len(),
                syn.test.len(),
                cfg.dim,
                a.out.display()
            );
            Ok(())
        }
    }
}

fn apply_train_args(c: &mut PipelineConfig, a: &TrainArgs) -> Result<()> {
    if let Some(v) = a.model {
        c.model.kind = v;
    }
    if let Some(v) = &a.variant {
        c.train.ablation = v.parse()?;
    }
    if let Some(v) = a.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.train.learning_rate = v;
    }
    if let Some(v) = &a.optimizer {
        c.train.optimizer = v.parse::<Optimizer>()?;
    }
    if let Some(v) = a.lambda {
        c.train.lambda = v;
    }
    if let Some(v) = a.patience {
        c.train.patience = (v > 0).then_some(v);
    }
    if let Some(v) = a.hidden {
        c.model.hidden_dim = v;
    }
    if let Some(v) = a.channels {
        c.model.conv_channels = v;
    }
    if let Some(v) = a.slots {
        c.model.slots = v;
    }
    if let Some(v) = a.fine_tune {
        c.train.fine_tune = v;
    }
    if let Some(v) = &a.out {
        c.checkpoint_dir = Some(v.clone());
    }
    Ok(())
}

fn serve(cli: &Cli, a: &ServeArgs) -> Result<()> {
    let mut m = load_manifest(cli)?;
    let train = load_corpus(&m.resolve(&m.config.train_corpus), m.config.num_classes, Split::Train)?;
    let sample_path = a.sample_file.clone().unwrap_or_else(|| m.artifact(artifacts::SAMPLE));
    let sample = read_sample(&sample_path).with_context(|| format!("reading {}", sample_path.display()))?;
    let tasks = build_tasks(&train, &sample)?;
    let log_path = a.log.clone().unwrap_or_else(|| m.work_dir().join("annotation_log.jsonl"));
    if let Some(dir) = log_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let svc = Arc::new(AnnotationService::new());
    svc.initialize(tasks, Some(log_path.clone()))?;
    let p = svc.progress()?;
    println!("{} of {} tasks already annotated", p.done, p.total);

    // later `annotate` runs read this log
    let stored = std::path::absolute(&log_path)?;
    m.config.annotations = AnnotationSource::Log { path: stored };
    m.save()?;

    let app = crowdtsc_cli::router(svc, a.static_dir.clone());
    let addr = format!("{}:{}", a.host, a.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        println!("annotation service listening on http://{addr}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })
}

fn predict(cli: &Cli, checkpoint: Option<&Path>, text: &[String], input: Option<&Path>) -> Result<()> {
    let m = load_manifest(cli)?;
    let ckpt_path = checkpoint.map_or_else(|| m.artifact(artifacts::CHECKPOINT), Path::to_path_buf);
    let ckpt = read_checkpoint(&ckpt_path).with_context(|| format!("reading {}", ckpt_path.display()))?;
    let vocab = Vocabulary::read(&m.artifact(artifacts::VOCAB))?;
    let (table, _) = load_pretrained(&m.artifact(artifacts::EMBEDDINGS), &vocab, m.config.embed_dim, m.config.seed)?;
    let mut texts = text.to_vec();
    if let Some(p) = input {
        texts.extend(std::fs::read_to_string(p)?.lines().filter(|l| !l.trim().is_empty()).map(String::from));
    }
    if texts.is_empty() {
        bail!("nothing to classify: pass --text or --input");
    }
    let ablation = ckpt.metadata.get("ablation").map(String::as_str).unwrap_or("full");
    let keywords = match ablation {
        "full" | "NC" if ckpt.model.num_slots() > 0 => {
            let mut k = KeywordSets::read(&m.artifact(artifacts::KEYWORDS))?;
            if ablation == "NC" {
                k = KeywordSets::from_seeds(k.seeds);
            }
            Some(k)
        }
        "T" if ckpt.model.num_slots() > 0 => {
            log::warn!("per-text tf-idf keywords are not available for new texts; keyword slots stay empty");
            None
        }
        _ => None,
    };
    let max_len = ckpt
        .metadata
        .get("max_len")
        .and_then(|v| v.parse().ok())
        .unwrap_or(m.config.max_len);
    let preds = predict_texts(&ckpt, &vocab, &table, keywords.as_ref(), max_len, &texts)?;
    let mut t = Table::new(&["class", "probability", "text"]);
    for (p, text) in preds.iter().zip(&texts) {
        let short: String = text.chars().take(60).collect();
        t.push(vec![
            (p.label + 1).to_string(),
            format!("{:.4}", p.probabilities[p.label]),
            short,
        ]);
    }
    print!("{}", t.to_text());
    Ok(())
}
