//! The staged pipeline: ingest, sample, annotate, cluster, expand, train and
//! eval, each producing plain files whose content hashes are kept in a JSON
//! manifest. A stage is up to date when its recorded input hashes (config
//! slice plus upstream outputs) and output hashes still match the disk, so
//! changing any upstream artifact invalidates everything below it.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::{build_tasks, read_records, seed_set, simulate_annotator, write_records, Oracle};
use crate::autodiff::nn::Activation;
use crate::clustering::{cluster, read_assignment, write_assignment, ClusterConfig};
use crate::corpus::{
    build_vocab, load_corpus, read_sample, sample_corpus, tokenize, write_sample, Corpus, Split, TokenId, Vocabulary,
    DEFAULT_MAX_LEN, DEFAULT_MIN_FREQ,
};
use crate::embeddings::{init_random, load_pretrained, EmbeddingTable, DEFAULT_DIM};
use crate::error::{argument, Error, Result};
use crate::kea::{expand_keywords, KeywordSets, Tfidf, DEFAULT_SLOTS, TFIDF_PER_TEXT};
use crate::models::{
    keyword_hash, predict as argmax, read_checkpoint, write_checkpoint, Checkpoint, Example, Hdnn, HdnnConfig,
    HdnnVariant, Karnn, KarnnConfig, Model, ModelKind, DEFAULT_HIDDEN,
};
use crate::trainer::{evaluate, prepare_examples, train, Ablation, KeywordContext, TrainConfig, TrainOutcome};

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_CLUSTER_LIMIT: usize = 5000;
pub const DEFAULT_SAMPLE_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Sample,
    Annotate,
    Cluster,
    Expand,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Sample,
        Stage::Annotate,
        Stage::Cluster,
        Stage::Expand,
        Stage::Train,
        Stage::Eval,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ingest => "ingest",
            Stage::Sample => "sample",
            Stage::Annotate => "annotate",
            Stage::Cluster => "cluster",
            Stage::Expand => "expand",
            Stage::Train => "train",
            Stage::Eval => "eval",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.to_string() == s || (s == "simulate" && *st == Stage::Annotate))
            .ok_or_else(|| argument(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

impl fmt::Display for StageStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageStatus::Ran => "ran",
            StageStatus::Skipped => "skipped (up to date)",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum AnnotationSource {
    /// Machine annotator over the sample.
    Simulate { oracle: Oracle },
    /// Record log written by the annotation service.
    Log { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    /// Attention width for KA-RNN; defaults to `hidden_dim`.
    pub attention_dim: Option<usize>,
    pub conv_width: usize,
    pub conv_channels: usize,
    pub slots: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            kind: ModelKind::Karnn,
            hidden_dim: DEFAULT_HIDDEN,
            attention_dim: None,
            conv_width: crate::models::DEFAULT_CONV_WIDTH,
            conv_channels: crate::models::DEFAULT_CONV_CHANNELS,
            slots: DEFAULT_SLOTS,
            activation: Activation::Tanh,
        }
    }
}

impl ModelSettings {
    /// Fresh model; `lambda` only affects KA-RNN.
    pub fn build(&self, embed_dim: usize, num_classes: usize, lambda: f64, seed: u64) -> Result<Model> {
        Ok(match self.kind {
            ModelKind::Karnn => {
                let mut c = KarnnConfig::new(embed_dim, num_classes);
                c.hidden_dim = self.hidden_dim;
                c.attention_dim = self.attention_dim.unwrap_or(self.hidden_dim);
                c.lambda = lambda;
                c.activation = self.activation;
                c.seed = seed;
                Model::Karnn(Karnn::new(c)?)
            }
            ModelKind::HdnnC | ModelKind::HdnnR => {
                let variant = if self.kind == ModelKind::HdnnC {
                    HdnnVariant::Cnn
                } else {
                    HdnnVariant::Rnn
                };
                let mut c = HdnnConfig::new(variant, embed_dim, num_classes);
                c.hidden_dim = self.hidden_dim;
                c.conv_width = self.conv_width;
                c.conv_channels = self.conv_channels;
                c.slots = self.slots;
                c.seed = seed;
                Model::Hdnn(Hdnn::new(c)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train_corpus: PathBuf,
    pub test_corpus: PathBuf,
    pub num_classes: usize,
    /// GloVe-style vectors; random initialisation when absent.
    pub embeddings: Option<PathBuf>,
    pub embed_dim: usize,
    pub min_freq: usize,
    pub max_len: usize,
    pub sample_ratio: f64,
    pub annotations: AnnotationSource,
    pub cluster: ClusterConfig,
    /// Only this many most frequent vocabulary tokens are clustered.
    pub cluster_limit: usize,
    pub model: ModelSettings,
    /// Its `seed` is replaced by the pipeline seed.
    pub train: TrainConfig,
    pub seed: u64,
    /// Artifact directory, relative to the manifest.
    pub work_dir: PathBuf,
    /// Where `train` writes the checkpoint; defaults to `work_dir`.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn new(train_corpus: PathBuf, test_corpus: PathBuf, num_classes: usize) -> Self {
        Self {
            train_corpus,
            test_corpus,
            num_classes,
            embeddings: None,
            embed_dim: DEFAULT_DIM,
            min_freq: DEFAULT_MIN_FREQ,
            max_len: DEFAULT_MAX_LEN,
            sample_ratio: DEFAULT_SAMPLE_RATIO,
            annotations: AnnotationSource::Simulate { oracle: Oracle::Tfidf },
            cluster: ClusterConfig::default(),
            cluster_limit: DEFAULT_CLUSTER_LIMIT,
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            seed: 0,
            work_dir: PathBuf::from("artifacts"),
            checkpoint_dir: None,
        }
    }

    fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t.model = self.model.kind;
        if t.ablation == Ablation::N {
            t.lambda = 0.0;
        }
        t
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: PipelineConfig,
    #[serde(default)]
    pub stages: BTreeMap<Stage, StageRecord>,
    #[serde(skip)]
    path: PathBuf,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn sha256_json(v: &impl Serialize) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(v)?)))
}

/// Artifact file names inside the work directory.
pub mod artifacts {
    pub const VOCAB: &str = "vocab.txt";
    pub const EMBEDDINGS: &str = "embeddings.txt";
    pub const SAMPLE: &str = "sample.txt";
    pub const ANNOTATIONS: &str = "annotations.jsonl";
    pub const CLUSTERS: &str = "clusters.txt";
    pub const KEYWORDS: &str = "keywords.txt";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const REPORT: &str = "train_report.jsonl";
    pub const SUMMARY: &str = "train_summary.txt";
    pub const EVAL_TEXT: &str = "eval.txt";
    pub const EVAL_CSV: &str = "eval.csv";
}

/// Train/test corpora, vocabulary and embedding table from the ingest stage.
pub struct Staged {
    pub train: Corpus,
    pub test: Corpus,
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
}

impl Manifest {
    pub fn new(path: &Path, config: PipelineConfig) -> Self {
        Self {
            version: MANIFEST_VERSION,
            config,
            stages: BTreeMap::new(),
            path: path.to_path_buf(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        m.path = path.to_path_buf();
        Ok(m)
    }

    pub fn save(&self) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = self.path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::rename(tmp, &self.path)?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Resolves a config path relative to the manifest's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    pub fn work_dir(&self) -> PathBuf {
        self.resolve(&self.config.work_dir)
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        if name == artifacts::CHECKPOINT {
            if let Some(d) = &self.config.checkpoint_dir {
                return self.resolve(d).join(name);
            }
        }
        self.work_dir().join(name)
    }

    fn deps(&self, stage: Stage) -> Vec<Stage> {
        match stage {
            Stage::Ingest => vec![],
            Stage::Sample | Stage::Cluster => vec![Stage::Ingest],
            Stage::Annotate => vec![Stage::Sample],
            Stage::Expand => vec![Stage::Cluster, Stage::Annotate],
            Stage::Train => match self.config.train.ablation {
                Ablation::Full | Ablation::NC => vec![Stage::Ingest, Stage::Expand],
                Ablation::N | Ablation::T => vec![Stage::Ingest],
            },
            Stage::Eval => vec![Stage::Ingest, Stage::Train],
        }
    }

    fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        use artifacts::*;
        let names: &[&str] = match stage {
            Stage::Ingest => &[VOCAB, EMBEDDINGS],
            Stage::Sample => &[SAMPLE],
            Stage::Annotate => &[ANNOTATIONS],
            Stage::Cluster => &[CLUSTERS],
            Stage::Expand => &[KEYWORDS],
            Stage::Train => &[CHECKPOINT, REPORT, SUMMARY],
            Stage::Eval => &[EVAL_TEXT, EVAL_CSV],
        };
        names.iter().map(|n| self.artifact(n)).collect()
    }

    fn config_slice(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        match stage {
            Stage::Ingest => sha256_json(&(c.num_classes, c.min_freq, c.embed_dim, c.seed, c.embeddings.is_some())),
            Stage::Sample => sha256_json(&(c.sample_ratio, c.seed)),
            Stage::Annotate => sha256_json(&(&c.annotations, c.seed)),
            Stage::Cluster => sha256_json(&(&c.cluster, c.cluster_limit, c.seed)),
            Stage::Expand => sha256_json(&()),
            Stage::Train => sha256_json(&(&c.model, &c.train_config(), c.max_len)),
            Stage::Eval => sha256_json(&c.max_len),
        }
    }

    /// Current input hashes: the stage's config slice, upstream outputs, and
    /// external input files.
    fn inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        m.insert("config".to_string(), self.config_slice(stage)?);
        let mut external = Vec::new();
        match stage {
            Stage::Ingest => {
                external.push(("train_corpus", self.resolve(&self.config.train_corpus)));
                external.push(("test_corpus", self.resolve(&self.config.test_corpus)));
                if let Some(e) = &self.config.embeddings {
                    external.push(("embeddings", self.resolve(e)));
                }
            }
            Stage::Annotate => {
                if let AnnotationSource::Log { path } = &self.config.annotations {
                    external.push(("annotation_log", self.resolve(path)));
                }
            }
            _ => {}
        }
        for (name, path) in external {
            let hash = sha256_file(&path).map_err(|e| match e {
                Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
                other => other,
            })?;
            m.insert(format!("file:{name}"), hash);
        }
        for dep in self.deps(stage) {
            if let Some(rec) = self.stages.get(&dep) {
                for (k, v) in &rec.outputs {
                    m.insert(format!("{dep}:{k}"), v.clone());
                }
            }
        }
        Ok(m)
    }

    fn output_hashes(&self, stage: Stage) -> Result<Option<BTreeMap<String, String>>> {
        let mut m = BTreeMap::new();
        for p in self.outputs(stage) {
            if !p.exists() {
                return Ok(None);
            }
            let name = p.file_name().expect("artifact has a name").to_string_lossy().into_owned();
            m.insert(name, sha256_file(&p)?);
        }
        Ok(Some(m))
    }

    /// True when the stage, and everything it depends on, is recorded and
    /// matches the files on disk.
    pub fn is_fresh(&self, stage: Stage) -> Result<bool> {
        let Some(rec) = self.stages.get(&stage) else {
            return Ok(false);
        };
        for dep in self.deps(stage) {
            if !self.is_fresh(dep)? {
                return Ok(false);
            }
        }
        if self.inputs(stage)? != rec.inputs {
            return Ok(false);
        }
        Ok(self.output_hashes(stage)?.as_ref() == Some(&rec.outputs))
    }

    fn require(&self, stage: Stage, deps: &[Stage]) -> Result<()> {
        for &dep in deps {
            if !self.is_fresh(dep)? {
                return Err(Error::Dependency {
                    stage: stage.to_string(),
                    missing: dep.to_string(),
                });
            }
        }
        Ok(())
    }

    /// Runs one stage if it is out of date. Fails with a dependency error
    /// naming the first upstream stage that is missing or stale.
    pub fn run_stage(&mut self, stage: Stage) -> Result<StageStatus> {
        self.require(stage, &self.deps(stage))?;
        if self.is_fresh(stage)? {
            log::info!("{stage}: skipped (up to date)");
            return Ok(StageStatus::Skipped);
        }
        let inputs = self.inputs(stage)?;
        std::fs::create_dir_all(self.work_dir())?;
        if let Some(p) = self.artifact(artifacts::CHECKPOINT).parent() {
            std::fs::create_dir_all(p)?;
        }
        log::info!("{stage}: running");
        self.execute(stage)?;
        let outputs = self
            .output_hashes(stage)?
            .ok_or_else(|| Error::State(format!("{stage} did not write all of its artifacts")))?;
        self.stages.insert(stage, StageRecord { inputs, outputs });
        self.save()?;
        Ok(StageStatus::Ran)
    }

    /// Runs every stage in order.
    pub fn run_all(&mut self) -> Result<Vec<(Stage, StageStatus)>> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            out.push((stage, self.run_stage(stage)?));
        }
        Ok(out)
    }

    fn load_corpora(&self) -> Result<(Corpus, Corpus)> {
        let c = &self.config;
        let train = load_corpus(&self.resolve(&c.train_corpus), c.num_classes, Split::Train)?;
        let test = load_corpus(&self.resolve(&c.test_corpus), c.num_classes, Split::Test)?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::Validation("train and test corpora must be non-empty".into()));
        }
        Ok((train, test))
    }

    /// Loads the ingest artifacts. Requires a fresh ingest stage.
    pub fn staged(&self) -> Result<Staged> {
        self.require(Stage::Ingest, &[Stage::Ingest])?;
        let (train, test) = self.load_corpora()?;
        let vocab = Vocabulary::read(&self.artifact(artifacts::VOCAB))?;
        let (table, _) = load_pretrained(&self.artifact(artifacts::EMBEDDINGS), &vocab, self.config.embed_dim, self.config.seed)?;
        Ok(Staged {
            train,
            test,
            vocab,
            table,
        })
    }

    fn execute(&self, stage: Stage) -> Result<()> {
        let c = &self.config;
        match stage {
            Stage::Ingest => {
                let (train, _) = self.load_corpora()?;
                let vocab = build_vocab(&train, c.min_freq);
                let table = match &c.embeddings {
                    Some(p) => load_pretrained(&self.resolve(p), &vocab, c.embed_dim, c.seed)?.0,
                    None => init_random(&vocab, c.embed_dim, c.seed)?,
                };
                vocab.write(&self.artifact(artifacts::VOCAB))?;
                table.write_text(&vocab, &self.artifact(artifacts::EMBEDDINGS))?;
            }
            Stage::Sample => {
                let (train, _) = self.load_corpora()?;
                let ids = sample_corpus(&train, c.sample_ratio, c.seed)?;
                write_sample(&self.artifact(artifacts::SAMPLE), &ids)?;
            }
            Stage::Annotate => {
                let (train, _) = self.load_corpora()?;
                let sample = read_sample(&self.artifact(artifacts::SAMPLE))?;
                let tasks = build_tasks(&train, &sample)?;
                let records = match &c.annotations {
                    AnnotationSource::Simulate { oracle } => {
                        let labels: HashMap<u64, usize> = train.documents.iter().map(|d| (d.id, d.label)).collect();
                        simulate_annotator(&tasks, &labels, *oracle, &train, c.seed)?
                    }
                    AnnotationSource::Log { path } => {
                        let records = read_records(&self.resolve(path))?;
                        let by_id: HashMap<u64, _> = tasks.iter().map(|t| (t.task_id, t)).collect();
                        for r in &records {
                            let ok = by_id.get(&r.task_id).is_some_and(|t| {
                                t.doc_id == r.doc_id
                                    && r.positions.len() == r.tokens.len()
                                    && r.positions
                                        .iter()
                                        .zip(&r.tokens)
                                        .all(|(&p, tok)| t.tokens.get(p) == Some(tok))
                            });
                            if !ok {
                                return Err(Error::Validation(format!(
                                    "annotation for task {} does not match the sample",
                                    r.task_id
                                )));
                            }
                        }
                        records
                    }
                };
                write_records(&self.artifact(artifacts::ANNOTATIONS), &records)?;
            }
            Stage::Cluster => {
                let st = self.staged()?;
                let (tokens, points) = cluster_domain(&st.vocab, &st.table, c.cluster_limit);
                let mut cfg = c.cluster.clone();
                cfg.seed = c.seed;
                let assignment = cluster(&points, &cfg)?;
                log::info!(
                    "{} clusters over {} tokens, {} noise",
                    assignment.num_clusters,
                    tokens.len(),
                    assignment.noise_count()
                );
                write_assignment(&self.artifact(artifacts::CLUSTERS), &tokens, &assignment)?;
            }
            Stage::Expand => {
                let (tokens, assignment) = read_assignment(&self.artifact(artifacts::CLUSTERS), c.cluster.method)?;
                let seeds = seed_set(&read_records(&self.artifact(artifacts::ANNOTATIONS))?);
                let sets = expand_keywords(&tokens, &assignment, &seeds);
                log::info!("{} seeds expanded to {} keywords", sets.seeds.len(), sets.expanded.len());
                sets.write(&self.artifact(artifacts::KEYWORDS))?;
            }
            Stage::Train => {
                let st = self.staged()?;
                let cfg = c.train_config();
                let (outcome, hash) = self.train_variant(&st, &c.model, &cfg)?;
                let ckpt = Checkpoint {
                    model: outcome.model,
                    keyword_hash: hash,
                    embeddings: outcome.embeddings,
                    metadata: [
                        ("ablation".to_string(), cfg.ablation.to_string()),
                        ("lambda".to_string(), cfg.lambda.to_string()),
                        ("max_len".to_string(), c.max_len.to_string()),
                    ]
                    .into(),
                };
                write_checkpoint(&self.artifact(artifacts::CHECKPOINT), &ckpt)?;
                outcome.report.write_jsonl(&self.artifact(artifacts::REPORT))?;
                std::fs::write(self.artifact(artifacts::SUMMARY), outcome.report.summary_table())?;
            }
            Stage::Eval => {
                let st = self.staged()?;
                let ckpt = read_checkpoint(&self.artifact(artifacts::CHECKPOINT))?;
                let ablation: Ablation = ckpt
                    .metadata
                    .get("ablation")
                    .map_or(Ok(c.train.ablation), |a| a.parse())?;
                let (_, test_ctx) = self.keyword_contexts(&st, ablation)?;
                let table = ckpt.embeddings.as_ref().unwrap_or(&st.table);
                let test = prepare_examples(&st.test, &st.vocab, &test_ctx, c.max_len, &ckpt.model);
                let accuracy = evaluate(&ckpt.model, table, &test)?;
                let mut t = Table::new(&["model", "variant", "documents", "accuracy"]);
                t.push(vec![
                    ckpt.model.kind().to_string(),
                    ablation.to_string(),
                    test.len().to_string(),
                    format!("{accuracy:.4}"),
                ]);
                std::fs::write(self.artifact(artifacts::EVAL_TEXT), t.to_text())?;
                std::fs::write(self.artifact(artifacts::EVAL_CSV), t.to_csv()?)?;
            }
        }
        Ok(())
    }

    fn keyword_sets(&self) -> Result<KeywordSets> {
        self.require(Stage::Train, &[Stage::Expand])?;
        KeywordSets::read(&self.artifact(artifacts::KEYWORDS))
    }

    /// Train and test keyword contexts for an ablation variant.
    pub fn keyword_contexts(&self, st: &Staged, ablation: Ablation) -> Result<(KeywordContext, KeywordContext)> {
        Ok(match ablation {
            Ablation::N => (KeywordContext::None, KeywordContext::None),
            Ablation::Full => {
                let k = self.keyword_sets()?.ids(&st.vocab);
                (KeywordContext::Global(k.clone()), KeywordContext::Global(k))
            }
            Ablation::NC => {
                let sets = self.keyword_sets()?;
                let k = KeywordSets::from_seeds(sets.seeds).ids(&st.vocab);
                (KeywordContext::Global(k.clone()), KeywordContext::Global(k))
            }
            Ablation::T => tfidf_contexts(&st.train, &st.test, &st.vocab),
        })
    }

    /// Trains one model for `settings` and `cfg` on the staged data. Returns
    /// the outcome and the hash of the keywords it saw.
    pub fn train_variant(
        &self,
        st: &Staged,
        settings: &ModelSettings,
        cfg: &TrainConfig,
    ) -> Result<(TrainOutcome, String)> {
        let (train_ctx, test_ctx) = self.keyword_contexts(st, cfg.ablation)?;
        let model = settings.build(st.table.dim(), self.config.num_classes, cfg.lambda, cfg.seed)?;
        let train_ex = prepare_examples(&st.train, &st.vocab, &train_ctx, self.config.max_len, &model);
        let test_ex = prepare_examples(&st.test, &st.vocab, &test_ctx, self.config.max_len, &model);
        let hash = keyword_hash(&context_tokens(&train_ctx, &st.vocab));
        let outcome = train(model, &st.table, &train_ex, &test_ex, cfg)?;
        Ok((outcome, hash))
    }

    /// Accuracy per variant and seed; the table's last column is the mean.
    pub fn ablate(&self, variants: &[Ablation], seeds: &[u64]) -> Result<AblationResult> {
        if variants.is_empty() || seeds.is_empty() {
            return Err(argument("ablation needs at least one variant and one seed"));
        }
        let st = self.staged()?;
        let mut rows = Vec::new();
        for &variant in variants {
            let mut accuracies = Vec::new();
            for &seed in seeds {
                let mut cfg = self.config.train_config();
                cfg.ablation = variant;
                cfg.seed = seed;
                if variant == Ablation::N {
                    cfg.lambda = 0.0;
                }
                let (outcome, _) = self.train_variant(&st, &self.config.model, &cfg)?;
                log::info!("{variant} seed {seed}: accuracy {:.4}", outcome.report.final_accuracy);
                accuracies.push(outcome.report.final_accuracy);
            }
            rows.push(AblationRow::new(variant, accuracies));
        }
        Ok(AblationResult {
            seeds: seeds.to_vec(),
            rows,
        })
    }

    /// One HDNN run per distinct slot count, all with the pipeline seed.
    pub fn sweep_fcn_length(&self, values: &[usize]) -> Result<Vec<(usize, f64)>> {
        if !matches!(self.config.model.kind, ModelKind::HdnnC | ModelKind::HdnnR) {
            return Err(argument("the FCN-length sweep needs an HDNN model"));
        }
        let mut seen = BTreeSet::new();
        let mut distinct = Vec::new();
        for &s in values {
            if seen.insert(s) {
                distinct.push(s);
            } else {
                log::warn!("slot count {s} listed more than once; running it once");
            }
        }
        if distinct.is_empty() {
            return Err(argument("no slot counts given"));
        }
        let st = self.staged()?;
        let cfg = self.config.train_config();
        let mut out = Vec::new();
        for s in distinct {
            let mut settings = self.config.model.clone();
            settings.slots = s;
            let (outcome, _) = self.train_variant(&st, &settings, &cfg)?;
            log::info!("s = {s}: accuracy {:.4}", outcome.report.final_accuracy);
            out.push((s, outcome.report.final_accuracy));
        }
        Ok(out)
    }

    pub fn report(&self) -> Result<String> {
        Ok(std::fs::read_to_string(self.artifact(artifacts::SUMMARY))?)
    }
}

/// The `limit` most frequent vocabulary tokens and their vectors.
pub fn cluster_domain(vocab: &Vocabulary, table: &EmbeddingTable, limit: usize) -> (Vec<String>, Vec<Vec<f64>>) {
    vocab
        .entries()
        .take(limit)
        .map(|(id, t)| (t.to_string(), table.row(id).to_vec()))
        .unzip()
}

/// Per-document top tf-idf keywords, with document frequencies fitted over
/// both splits.
pub fn tfidf_contexts(train: &Corpus, test: &Corpus, vocab: &Vocabulary) -> (KeywordContext, KeywordContext) {
    let docs = train.documents.iter().chain(&test.documents);
    let model = Tfidf::fit(docs.map(|d| d.tokens.as_slice()));
    let ctx = |c: &Corpus| {
        KeywordContext::PerDocument(
            c.documents
                .iter()
                .map(|d| {
                    let ids: HashSet<TokenId> = model
                        .top(&d.tokens, TFIDF_PER_TEXT)
                        .iter()
                        .filter_map(|t| vocab.get(t))
                        .collect();
                    (d.id, ids)
                })
                .collect(),
        )
    };
    (ctx(train), ctx(test))
}

fn context_tokens(ctx: &KeywordContext, vocab: &Vocabulary) -> BTreeSet<String> {
    let name = |id: &TokenId| vocab.token(*id).map(str::to_string);
    match ctx {
        KeywordContext::None => BTreeSet::new(),
        KeywordContext::Global(k) => k.iter().filter_map(name).collect(),
        KeywordContext::PerDocument(m) => m.values().flatten().filter_map(name).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Ablation,
    pub accuracies: Vec<f64>,
    pub mean: f64,
}

impl AblationRow {
    fn new(variant: Ablation, accuracies: Vec<f64>) -> Self {
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        Self {
            variant,
            accuracies,
            mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    pub fn mean(&self, variant: Ablation) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.mean)
    }

    pub fn table(&self) -> Table {
        let mut headers = vec!["variant".to_string()];
        headers.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        headers.push("mean".into());
        let mut t = Table {
            headers,
            rows: Vec::new(),
        };
        for r in &self.rows {
            let mut row = vec![r.variant.to_string()];
            row.extend(r.accuracies.iter().map(|a| format!("{a:.4}")));
            row.push(format!("{:.4}", r.mean));
            t.rows.push(row);
        }
        t
    }
}

pub fn sweep_table(rows: &[(usize, f64)]) -> Table {
    let mut t = Table::new(&["slots", "accuracy"]);
    for (s, a) in rows {
        t.push(vec![s.to_string(), format!("{a:.4}")]);
    }
    t
}

/// A small table rendered as aligned text or CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.headers.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.len());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&self.headers);
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).map_err(std::io::Error::other)?;
        for r in &self.rows {
            w.write_record(r).map_err(std::io::Error::other)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 cells"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    /// Zero-based class index.
    pub label: usize,
    pub probabilities: Vec<f64>,
}

/// Classifies raw texts with a checkpoint. HDNN checkpoints need the
/// keyword set they were trained with; a hash mismatch is an error.
pub fn predict_texts(
    ckpt: &Checkpoint,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    keywords: Option<&KeywordSets>,
    max_len: usize,
    texts: &[String],
) -> Result<Vec<Prediction>> {
    let ids = match keywords {
        Some(k) => {
            let ids = k.ids(vocab);
            if keyword_hash(&context_tokens(&KeywordContext::Global(ids.clone()), vocab)) != ckpt.keyword_hash {
                return Err(Error::Validation(
                    "keyword set differs from the one used at training time".into(),
                ));
            }
            Some(ids)
        }
        None => None,
    };
    let table = ckpt.embeddings.as_ref().unwrap_or(table);
    texts
        .iter()
        .map(|text| {
            let tokens = vocab.encode(&tokenize(text), max_len);
            let mut ex = Example::new(tokens, 0, ids.as_ref(), ckpt.model.num_slots());
            ex.pad_to(ckpt.model.min_len());
            let p = ckpt.model.probabilities(table, &ex)?;
            Ok(Prediction {
                label: argmax(&p),
                probabilities: p,
            })
        })
        .collect()
}

/// Per-epoch training losses from a `train_report.jsonl` file.
pub fn read_report_curve(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if let Some(l) = v.get("train_loss").and_then(|l| l.as_f64()) {
            out.push(l);
        }
    }
    Ok(out)
}
