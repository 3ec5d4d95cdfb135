//! End-to-end workflows behind the CLI subcommands: data generation,
//! backbone finetuning, autoencoder training, and evaluation. Every command
//! writes its resolved config and provenance hashes next to its outputs and
//! is deterministic given (config, seed).

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ae::LearnAutoencoder;
use crate::backbone::{finetune, fit_normalizer, BackboneModel, FeatureNormalizer, FinetuneHistory};
use crate::checkpoint::Checkpoint;
use crate::config::{ConfigError, RunConfig};
use crate::data::occlude::{OccluderKind, ALL_OCCLUDERS};
use crate::data::stream::{freeze_test_sets, FrozenSuite, OcclusionPolicy};
use crate::data::{DataError, DatasetManifest, SplitTag};
use crate::error::ModelError;
use crate::eval::{evaluate_rows, ResultsTable, TableMeta, Variant};
use crate::report;
use crate::tensor::TensorError;
use crate::trainer::{train_learn, TrainingHistory};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("{what} not found at {path}; run `{hint}` first")]
    Missing {
        what: &'static str,
        path: PathBuf,
        hint: &'static str,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Process exit code: 2 for invariant violations, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Invariant(_) => 2,
            _ => 1,
        }
    }
}

/// File layout inside a run directory.
pub struct RunPaths {
    pub out_dir: PathBuf,
}

impl RunPaths {
    pub fn new(out_dir: &Path) -> RunPaths {
        RunPaths {
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.out_dir.join("config.resolved.toml")
    }
    pub fn provenance(&self) -> PathBuf {
        self.out_dir.join("provenance.txt")
    }
    pub fn manifest(&self) -> PathBuf {
        self.out_dir.join("dataset").join("manifest.txt")
    }
    pub fn frozen_sets(&self) -> PathBuf {
        self.out_dir.join("dataset").join("frozen.txt")
    }
    pub fn backbone_checkpoint(&self) -> PathBuf {
        self.out_dir.join("backbone.ckpt")
    }
    pub fn backbone_metrics(&self) -> PathBuf {
        self.out_dir.join("backbone_metrics.tsv")
    }
    pub fn ae_checkpoint(&self) -> PathBuf {
        self.out_dir.join("ae.ckpt")
    }
    pub fn results_dir(&self) -> PathBuf {
        self.out_dir.join("results")
    }
}

fn write_resolved_config(paths: &RunPaths, config: &RunConfig) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&paths.out_dir)?;
    std::fs::write(paths.resolved_config(), config.to_toml())?;
    Ok(())
}

fn write_provenance(paths: &RunPaths, entries: &[(&str, String)]) -> Result<(), PipelineError> {
    std::fs::write(paths.provenance(), report::provenance_text(entries))?;
    Ok(())
}

pub struct GenerateOutcome {
    pub manifest: DatasetManifest,
    pub suite: FrozenSuite,
}

/// Generate the dataset manifest and the frozen occluded test sets.
/// Idempotent: rerunning with the same config rewrites identical bytes.
pub fn cmd_generate_data(config: &RunConfig) -> Result<GenerateOutcome, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.out_dir);
    let manifest = DatasetManifest::generate(
        config.dataset.num_classes,
        config.dataset.per_class,
        config.dataset.image_size,
        config.seed,
    )?;
    // Frozen cells cover every occluder type regardless of the training
    // policy, so held-out evaluation always has its cells available.
    let suite = freeze_test_sets(&manifest, &ALL_OCCLUDERS, config.seed)?;

    std::fs::create_dir_all(paths.out_dir.join("dataset"))?;
    manifest.save(&paths.manifest())?;
    suite.save(&paths.frozen_sets())?;
    write_resolved_config(&paths, config)?;
    write_provenance(
        &paths,
        &[
            ("config_hash", config.content_hash()),
            ("manifest_hash", manifest.content_hash()),
            ("seed", config.seed.to_string()),
        ],
    )?;
    Ok(GenerateOutcome { manifest, suite })
}

fn load_dataset(paths: &RunPaths) -> Result<(DatasetManifest, FrozenSuite), PipelineError> {
    let manifest_path = paths.manifest();
    if !manifest_path.exists() {
        return Err(PipelineError::Missing {
            what: "dataset manifest",
            path: manifest_path,
            hint: "generate-data",
        });
    }
    let manifest = DatasetManifest::load(&manifest_path)?;
    let suite = FrozenSuite::load(&paths.frozen_sets())?;
    Ok((manifest, suite))
}

pub struct BackboneOutcome {
    pub clean_test_accuracy: f64,
    pub history: FinetuneHistory,
    pub param_hash: String,
}

/// Finetune the backbone on clean images, fit the feature normalizer,
/// freeze everything, and persist the checkpoint.
pub fn cmd_train_backbone(config: &RunConfig) -> Result<BackboneOutcome, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.out_dir);
    let (manifest, _) = load_dataset(&paths)?;

    let model = BackboneModel::build(config.dataset.num_classes, config.dataset.image_size, config.seed);
    if config.backbone.momentum != 0.9 {
        log::warn!("backbone momentum fixed at 0.9; ignoring {}", config.backbone.momentum);
    }
    let history = finetune(
        &model,
        &manifest,
        config.backbone.epochs,
        config.backbone.learning_rate,
        config.backbone.batch_size,
        config.seed,
    )?;
    let normalizer = fit_normalizer(&model.extractor, &manifest)?;
    model.freeze();

    let test_idx: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == SplitTag::Test)
        .map(|(i, _)| i)
        .collect();
    let clean_test_accuracy = crate::backbone::accuracy_on(&model, &manifest, &test_idx)?;

    let ckpt = model.to_checkpoint(Some(&normalizer))?;
    ckpt.save(&paths.backbone_checkpoint())?;
    let param_hash = ckpt.content_hash()?;

    let mut metrics = String::from("epoch\ttrain_loss\tval_accuracy\n");
    for (i, e) in history.epochs.iter().enumerate() {
        metrics.push_str(&format!("{i}\t{:.6}\t{:.4}\n", e.train_loss, e.val_accuracy));
    }
    metrics.push_str(&format!(
        "# best_epoch {} clean_test_accuracy {:.4}\n",
        history.best_epoch, clean_test_accuracy
    ));
    std::fs::write(paths.backbone_metrics(), metrics)?;

    write_resolved_config(&paths, config)?;
    write_provenance(
        &paths,
        &[
            ("config_hash", config.content_hash()),
            ("manifest_hash", manifest.content_hash()),
            ("backbone_hash", param_hash.clone()),
            ("seed", config.seed.to_string()),
        ],
    )?;
    Ok(BackboneOutcome {
        clean_test_accuracy,
        history,
        param_hash,
    })
}

fn load_backbone(
    paths: &RunPaths,
) -> Result<(BackboneModel, FeatureNormalizer, String), PipelineError> {
    let path = paths.backbone_checkpoint();
    if !path.exists() {
        return Err(PipelineError::Missing {
            what: "backbone checkpoint",
            path,
            hint: "train-backbone",
        });
    }
    let ckpt = Checkpoint::load(&path)?;
    let hash = ckpt.content_hash()?;
    let (model, normalizer) = BackboneModel::from_checkpoint(&ckpt)?;
    let normalizer = normalizer.ok_or_else(|| {
        PipelineError::Invariant("backbone checkpoint lacks a fitted normalizer".into())
    })?;
    Ok((model, normalizer, hash))
}

pub struct LearnOutcome {
    pub history: TrainingHistory,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Train the autoencoder over the frozen backbone and persist its
/// checkpoint. Audits that the backbone parameter hash is unchanged and,
/// when a held-out type is configured, that it never occurs in training.
pub fn cmd_train_learn(config: &RunConfig) -> Result<LearnOutcome, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.out_dir);
    let (manifest, _) = load_dataset(&paths)?;
    let (model, normalizer, _) = load_backbone(&paths)?;
    if !model.is_frozen() {
        return Err(ModelError::UnfrozenBackbone.into());
    }
    let backbone_hash_before = model.param_hash()?;

    let mut policy = OcclusionPolicy {
        types: config.occluder_types(),
        coverage_range: (config.occlusion.coverage_min, config.occlusion.coverage_max),
        clean_fraction: config.occlusion.clean_fraction,
    };
    if let Some(heldout) = config.heldout_type() {
        policy = policy.without(heldout);
        if policy.types.is_empty() {
            return Err(PipelineError::Invariant(
                "held-out type leaves no training occluders".into(),
            ));
        }
    }

    let ae = LearnAutoencoder::build(model.extractor.feature_shape, config.seed)?;
    let history = train_learn(
        &ae,
        &model.extractor,
        &model.head,
        &normalizer,
        &manifest,
        policy,
        &config.train_config(),
    )?;

    let backbone_hash_after = model.param_hash()?;
    if backbone_hash_after != backbone_hash_before {
        return Err(PipelineError::Invariant(format!(
            "backbone parameters changed during autoencoder training: {backbone_hash_before} -> {backbone_hash_after}"
        )));
    }
    if let Some(heldout) = config.heldout_type() {
        let drawn = history
            .type_counts
            .iter()
            .find(|(name, _)| name == heldout.name())
            .map(|(_, count)| *count)
            .unwrap_or(0);
        if drawn != 0 {
            return Err(PipelineError::Invariant(format!(
                "held-out occluder `{}` appeared {drawn} times in training",
                heldout.name()
            )));
        }
    }

    let mut ckpt = ae.to_checkpoint()?;
    let w = config.loss_weights();
    ckpt.set_meta("lambda_intra", w.lambda_intra);
    ckpt.set_meta("lambda_inter", w.lambda_inter);
    ckpt.set_meta("lambda_cls", w.lambda_cls);
    ckpt.set_meta("margin", w.margin);
    ckpt.set_meta("backbone_hash", &backbone_hash_before);
    ckpt.save(&paths.ae_checkpoint())?;
    report::write_history(&paths.out_dir, &history)?;

    write_resolved_config(&paths, config)?;
    write_provenance(
        &paths,
        &[
            ("config_hash", config.content_hash()),
            ("manifest_hash", manifest.content_hash()),
            ("backbone_hash", backbone_hash_before.clone()),
            ("ae_hash", ckpt.content_hash()?),
            ("seed", config.seed.to_string()),
        ],
    )?;
    Ok(LearnOutcome {
        history,
        backbone_hash_before,
        backbone_hash_after,
    })
}

pub struct EvalOutcome {
    /// Baseline + proposed rows over the training occluder types.
    pub table: ResultsTable,
    /// Held-out-type rows, when a held-out type is configured.
    pub heldout_table: Option<ResultsTable>,
    pub clean_preserved: bool,
}

/// Evaluate baseline and proposed pipelines over the frozen cells and write
/// the results files. Fails with an invariant error (exit code 2) when the
/// proposed pipeline loses more than one point of clean accuracy.
pub fn cmd_evaluate(config: &RunConfig) -> Result<EvalOutcome, PipelineError> {
    config.validate()?;
    let paths = RunPaths::new(&config.out_dir);
    let (manifest, suite) = load_dataset(&paths)?;
    let (model, normalizer, _) = load_backbone(&paths)?;
    let ae_path = paths.ae_checkpoint();
    if !ae_path.exists() {
        return Err(PipelineError::Missing {
            what: "autoencoder checkpoint",
            path: ae_path,
            hint: "train-learn",
        });
    }
    let ae = LearnAutoencoder::from_checkpoint(&Checkpoint::load(&ae_path)?)?;
    if ae.feature_shape != model.extractor.feature_shape {
        return Err(ModelError::FeatureShapeMismatch {
            expected: model.extractor.feature_shape.to_vec(),
            got: ae.feature_shape.to_vec(),
        }
        .into());
    }

    let meta = TableMeta {
        seed: config.seed,
        manifest_hash: manifest.content_hash(),
        config_hash: config.content_hash(),
    };
    let variants = [
        Variant::Baseline,
        Variant::Proposed {
            ae: &ae,
            normalizer: &normalizer,
        },
    ];

    let heldout = config.heldout_type();
    let eval_types: Vec<OccluderKind> = match heldout {
        Some(h) => config.occluder_types().into_iter().filter(|t| *t != h).collect(),
        None => config.occluder_types(),
    };
    let table = evaluate_rows(
        &model.extractor,
        &model.head,
        &variants,
        &manifest,
        &suite,
        &eval_types,
        meta.clone(),
    )?;
    let heldout_table = match heldout {
        Some(h) => Some(evaluate_rows(
            &model.extractor,
            &model.head,
            &variants,
            &manifest,
            &suite,
            &[h],
            meta.clone(),
        )?),
        None => None,
    };

    let results_dir = paths.results_dir();
    report::write_table(&results_dir, "results", &table)?;
    if let Some(t) = &heldout_table {
        report::write_table(&results_dir, "results_heldout", t)?;
    }
    std::fs::write(
        results_dir.join("provenance.txt"),
        report::provenance_text(&[
            ("config_hash", meta.config_hash.clone()),
            ("manifest_hash", meta.manifest_hash.clone()),
            ("seed", config.seed.to_string()),
        ]),
    )?;

    let baseline_l0 = table.cell("baseline", "L0").unwrap_or(0.0);
    let proposed_l0 = table.cell("proposed", "L0").unwrap_or(0.0);
    let clean_preserved = proposed_l0 >= baseline_l0 - 0.01;
    if !clean_preserved {
        return Err(PipelineError::Invariant(format!(
            "clean accuracy not preserved: baseline L0 {baseline_l0:.4}, proposed L0 {proposed_l0:.4}"
        )));
    }
    Ok(EvalOutcome {
        table,
        heldout_table,
        clean_preserved,
    })
}

/// generate -> train-backbone -> train-learn -> evaluate, in order.
pub fn run_full_pipeline(config: &RunConfig) -> Result<EvalOutcome, PipelineError> {
    cmd_generate_data(config)?;
    cmd_train_backbone(config)?;
    cmd_train_learn(config)?;
    cmd_evaluate(config)
}

/// Train on all but the held-out occluder type, then report (seen, held-out)
/// tables. Runs in its own `<out_dir>_heldout_<type>` directory; the training
/// stream is audited to contain zero held-out draws.
pub fn heldout_occluder_protocol(
    config: &RunConfig,
    heldout: OccluderKind,
) -> Result<(ResultsTable, ResultsTable), PipelineError> {
    let mut config = config.clone();
    config.occlusion.heldout_type = Some(heldout.name().to_string());
    config.out_dir = PathBuf::from(format!(
        "{}_heldout_{}",
        config.out_dir.display(),
        heldout.name()
    ));
    cmd_generate_data(&config)?;
    cmd_train_backbone(&config)?;
    cmd_train_learn(&config)?;
    let outcome = cmd_evaluate(&config)?;
    let heldout_table = outcome
        .heldout_table
        .expect("held-out table present when heldout_type is set");
    Ok((outcome.table, heldout_table))
}
