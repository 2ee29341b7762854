#![allow(dead_code)]

use std::path::Path;

use crowdtsc::annotation::Oracle;
use crowdtsc::clustering::{ClusterConfig, ClusterMethod};
use crowdtsc::models::ModelKind;
use crowdtsc::pipeline::{AnnotationSource, Manifest, PipelineConfig};
use crowdtsc::synthetic::{generate, Synthetic, SyntheticConfig};
use crowdtsc::trainer::Optimizer;

pub const MANIFEST: &str = "crowdtsc.json";

/// The noisy keyword-determined corpus the ablation runs on.
pub fn ablation_corpus() -> SyntheticConfig {
    SyntheticConfig {
        label_noise: 0.2,
        indicators_per_class: 40,
        min_len: 12,
        max_len: 24,
        class_separation: 0.5,
        seed: 7,
        ..Default::default()
    }
}

/// Pipeline over the corpus files in `dir`, all paths relative to the
/// manifest so two directories with the same data get identical manifests.
pub fn pipeline_config(syn: &SyntheticConfig) -> PipelineConfig {
    let mut c = PipelineConfig::new("train.csv".into(), "test.csv".into(), syn.num_classes);
    c.embeddings = Some("vectors.txt".into());
    c.embed_dim = syn.dim;
    c.min_freq = 1;
    c.max_len = 64;
    c.annotations = AnnotationSource::Simulate { oracle: Oracle::Label };
    c.cluster = ClusterConfig {
        method: ClusterMethod::Dbscan,
        eps: Some(1.0),
        min_pts: 4,
        ..Default::default()
    };
    c.model.kind = ModelKind::HdnnC;
    c.model.hidden_dim = 32;
    c.model.conv_channels = 32;
    c.train.epochs = 10;
    c.train.learning_rate = 0.01;
    c.train.optimizer = Optimizer::Adam;
    c.train.patience = None;
    c
}

pub fn write_synthetic(dir: &Path, syn: &SyntheticConfig) -> Synthetic {
    let s = generate(syn).expect("synthetic corpus");
    s.write_to(dir).expect("write synthetic corpus");
    s
}

pub fn manifest(dir: &Path, syn: &SyntheticConfig, edit: impl FnOnce(&mut PipelineConfig)) -> Manifest {
    write_synthetic(dir, syn);
    let mut c = pipeline_config(syn);
    edit(&mut c);
    let m = Manifest::new(&dir.join(MANIFEST), c);
    m.save().expect("save manifest");
    m
}
