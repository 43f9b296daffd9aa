//! End-to-end commands: world synthesis, the two training stages,
//! evaluation, gradient checking and the ablation sweep.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::ExperimentConfig;
use crate::detector::{
    detect, project_image, train_stt, ClassCatalog, Detection, KnownHead, SttExample, SttOutcome,
    SttStepRecord,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, GroundTruth, Setup, SetupDetections};
use crate::gradsuite::{run_suite, GradCheckResult, GradSuiteConfig, GradTerm};
use crate::io::{write_json, write_jsonl, DirLock};
use crate::lsm::{train_lsm, LsmExample, LsmStepRecord, RegionMode};
use crate::model::Model;
use crate::optim::Sgd;
use crate::params::ParamGroup;
use crate::synthworld::{
    generate_world, load_dataset, save_dataset, world_statistics, Dataset, Split, WorldStatistics,
};

pub const THREADS_ENV: &str = "LOCOV_THREADS";
pub const LSM_CHECKPOINT: &str = "lsm.ckpt";
pub const STT_CHECKPOINT: &str = "stt.ckpt";
pub const LSM_FAILED_CHECKPOINT: &str = "lsm_failed.ckpt";
pub const LSM_METRICS: &str = "lsm_metrics.jsonl";
pub const STT_METRICS: &str = "stt_metrics.jsonl";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_DELTA_CSV: &str = "eval_delta.csv";
pub const GRADCHECK_JSONL: &str = "gradcheck.jsonl";
pub const ABLATION_CSV: &str = "ablation.csv";

const LSM_STREAM: u64 = 0x15;
const STT_STREAM: u64 = 0x57;

/// Runs `f` on a pool capped by `LOCOV_THREADS` when set.
pub fn with_threads<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|n| *n > 0).ok_or_else(|| {
            Error::invalid_config(
                THREADS_ENV,
                format!("expected a positive integer, got {v:?}"),
            )
        })?;
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(pool.install(f))
}

pub fn init_model(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Model> {
    let dims = cfg.model_dims(dataset);
    Model::init(
        dims,
        &cfg.model.init,
        &mut ChaCha8Rng::seed_from_u64(cfg.seed),
    )
}

pub fn lsm_examples(cfg: &ExperimentConfig, dataset: &Dataset) -> Vec<LsmExample> {
    dataset
        .train
        .iter()
        .map(|img| LsmExample::from_image(img, cfg.regions.box_threshold, cfg.regions.box_cap))
        .filter(|ex| ex.boxes.is_some() || cfg.regions.mode == RegionMode::Grid)
        .collect()
}

pub fn stt_examples(cfg: &ExperimentConfig, dataset: &Dataset) -> Vec<SttExample> {
    dataset
        .train
        .iter()
        .filter_map(|img| {
            SttExample::from_image(
                img,
                cfg.regions.box_threshold,
                cfg.regions.box_cap,
                cfg.stt.match_iou,
            )
        })
        .collect()
}

pub fn lsm_optimizer(cfg: &ExperimentConfig) -> Sgd {
    Sgd::new(cfg.lsm.momentum, cfg.lsm.clip_norm)
}

pub fn stt_optimizer(cfg: &ExperimentConfig) -> Sgd {
    Sgd::new(cfg.stt.momentum, cfg.stt.clip_norm)
}

/// Stage one from a fresh initialization. Parameters are rounded to `f32`
/// at the end so the in-memory model equals its checkpoint.
pub fn train_lsm_stage(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    model: &mut Model,
    sgd: &mut Sgd,
    on_step: impl FnMut(&LsmStepRecord, &Model, &Sgd) -> Result<()>,
) -> Result<Vec<LsmStepRecord>> {
    let examples = lsm_examples(cfg, dataset);
    let log = train_lsm(
        model,
        sgd,
        &examples,
        &cfg.lsm,
        cfg.regions.mode,
        cfg.seed ^ (LSM_STREAM << 32),
        on_step,
    )?;
    model.params.round_to_f32();
    Ok(log)
}

/// Stage two on top of `model`, validating on the val split by generalized AP.
pub fn train_stt_stage(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    model: &mut Model,
    sgd: &mut Sgd,
) -> Result<SttOutcome> {
    let examples = stt_examples(cfg, dataset);
    let head = KnownHead::new(&dataset.classes, model.dims.vocab_size)?;
    let outcome = train_stt(
        model,
        sgd,
        &examples,
        &head,
        &cfg.stt,
        cfg.seed ^ (STT_STREAM << 32),
        |m| {
            let (report, _) = evaluate_model(cfg, m, dataset, Split::Val, &[Setup::Generalized])?;
            Ok(report.generalized.map_or(0.0, |g| g.summary.ap))
        },
    )?;
    model.params.round_to_f32();
    Ok(outcome)
}

pub fn ground_truths(dataset: &Dataset, split: Split) -> Vec<GroundTruth> {
    dataset
        .split(split)
        .iter()
        .flat_map(|img| {
            img.objects.iter().map(|o| GroundTruth {
                image_id: img.image_id,
                bbox: o.bbox,
                class_id: o.class_id,
            })
        })
        .collect()
}

/// Detections on every image of `split`; image order is preserved.
pub fn detect_split(
    cfg: &ExperimentConfig,
    model: &Model,
    catalog: &ClassCatalog,
    dataset: &Dataset,
    split: Split,
    setup: Setup,
) -> Result<Vec<Detection>> {
    let per_image: Vec<Result<Vec<Detection>>> = dataset
        .split(split)
        .par_iter()
        .map(|img| {
            let (boxes, projected) =
                project_image(model, img, cfg.regions.box_threshold, cfg.regions.box_cap)?;
            detect(
                img.image_id,
                &boxes,
                projected.as_ref(),
                catalog,
                setup.class_set(),
                &cfg.detect,
            )
        })
        .collect();
    let mut out = Vec::new();
    for d in per_image {
        out.extend(d?);
    }
    Ok(out)
}

pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &Model,
    dataset: &Dataset,
    split: Split,
    setups: &[Setup],
) -> Result<(EvalReport, Vec<SetupDetections>)> {
    let catalog = ClassCatalog::from_model(model, &dataset.classes)?;
    let runs = setups
        .iter()
        .map(|&setup| {
            Ok(SetupDetections {
                setup,
                class_set: setup.class_set(),
                detections: detect_split(cfg, model, &catalog, dataset, split, setup)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&runs, &ground_truths(dataset, split), &dataset.classes)?;
    Ok((report, runs))
}

struct JsonlWriter(BufWriter<File>);

impl JsonlWriter {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self(BufWriter::new(File::create(path)?)))
    }

    fn push<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.0, record)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.0.flush()?;
        Ok(())
    }
}

/// Generates a world and writes it to `out`.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<WorldStatistics> {
    cfg.validate()?;
    let _lock = DirLock::acquire(out)?;
    let dataset = generate_world(&cfg.world)?;
    save_dataset(&dataset, out)?;
    let stats = world_statistics(&dataset);
    write_json(&out.join("stats.json"), &stats)?;
    Ok(stats)
}

/// Stage one. Writes the metrics log, optional periodic checkpoints and the
/// final checkpoint. A non-finite loss dumps the current state before the
/// error is returned.
pub fn cmd_train_lsm(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    out: &Path,
) -> Result<Vec<LsmStepRecord>> {
    cfg.validate()?;
    let dataset = load_dataset(dataset_dir)?;
    let _lock = DirLock::acquire(out)?;
    let mut model = init_model(cfg, &dataset)?;
    let mut sgd = lsm_optimizer(cfg);
    let mut metrics = JsonlWriter::create(&out.join(LSM_METRICS))?;
    let every = cfg.lsm.checkpoint_every;
    let result = with_threads(|| {
        train_lsm_stage(cfg, &dataset, &mut model, &mut sgd, |rec, m, s| {
            metrics.push(rec)?;
            if every > 0 && (rec.step + 1) % every == 0 && rec.step + 1 < cfg.lsm.steps {
                Checkpoint::new(Stage::Lsm, rec.step + 1, cfg, m, s)
                    .save(&out.join(format!("lsm_step{:06}.ckpt", rec.step + 1)))?;
            }
            Ok(())
        })
    })?;
    metrics.finish()?;
    match result {
        Ok(log) => {
            Checkpoint::new(Stage::Lsm, cfg.lsm.steps, cfg, &model, &sgd)
                .save(&out.join(LSM_CHECKPOINT))?;
            Ok(log)
        }
        Err(e) => {
            if matches!(e, Error::NonFiniteLoss(_)) {
                Checkpoint::new(Stage::Lsm, 0, cfg, &model, &sgd)
                    .save(&out.join(LSM_FAILED_CHECKPOINT))?;
            }
            Err(e)
        }
    }
}

/// Stage two from a stage-one checkpoint. `cfg` overrides the configuration
/// stored in the checkpoint; the model dimensions always come from the
/// checkpoint.
pub fn cmd_train_stt(
    cfg: Option<&ExperimentConfig>,
    dataset_dir: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<SttOutcome> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.stage != Stage::Lsm {
        return Err(Error::WrongStage {
            expected: Stage::Lsm.name().into(),
            found: ck.stage.name().into(),
        });
    }
    let cfg = cfg.cloned().unwrap_or_else(|| ck.config.clone());
    cfg.validate()?;
    let dataset = load_dataset(dataset_dir)?;
    if cfg.model_dims(&dataset) != ck.dims {
        return Err(Error::Checkpoint(format!(
            "checkpoint dimensions {:?} do not match the dataset and config",
            ck.dims
        )));
    }
    let _lock = DirLock::acquire(out)?;
    let mut model = ck.model();
    let mut sgd = stt_optimizer(&cfg);
    let outcome = with_threads(|| train_stt_stage(&cfg, &dataset, &mut model, &mut sgd))??;
    let mut metrics = JsonlWriter::create(&out.join(STT_METRICS))?;
    for rec in &outcome.log {
        metrics.push::<SttStepRecord>(rec)?;
    }
    metrics.finish()?;
    let step = outcome.best_step.map_or(outcome.log.len(), |s| s + 1);
    Checkpoint::new(Stage::Stt, step, &cfg, &model, &sgd).save(&out.join(STT_CHECKPOINT))?;
    Ok(outcome)
}

/// Evaluates a stage-two checkpoint on `split`. Writes the JSON report, the
/// summary and per-class delta CSVs, and one detections file per setup.
pub fn cmd_evaluate(
    checkpoint: &Path,
    dataset_dir: &Path,
    split: Split,
    setups: &[Setup],
    out: &Path,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.stage != Stage::Stt {
        return Err(Error::WrongStage {
            expected: Stage::Stt.name().into(),
            found: ck.stage.name().into(),
        });
    }
    let dataset = load_dataset(dataset_dir)?;
    let _lock = DirLock::acquire(out)?;
    let model = ck.model();
    let (report, runs) =
        with_threads(|| evaluate_model(&ck.config, &model, &dataset, split, setups))??;
    write_json(&out.join(EVAL_JSON), &report)?;
    std::fs::write(out.join(EVAL_CSV), report.to_csv())?;
    std::fs::write(out.join(EVAL_DELTA_CSV), report.delta_csv())?;
    for run in &runs {
        write_jsonl(
            &out.join(format!("detections_{}.jsonl", run.setup.name())),
            &run.detections,
        )?;
    }
    Ok(report)
}

/// Runs the gradient suite; `corrupt` perturbs one term's analytic gradient.
pub fn cmd_gradcheck(
    suite: &GradSuiteConfig,
    terms: &[GradTerm],
    corrupt: Option<GradTerm>,
    out: Option<&Path>,
) -> Result<Vec<GradCheckResult>> {
    let results = run_suite(terms, suite, corrupt)?;
    if let Some(out) = out {
        let _lock = DirLock::acquire(out)?;
        write_jsonl(&out.join(GRADCHECK_JSONL), &results)?;
    }
    Ok(results)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    LsmStt,
    SttOnly,
    LsmOnly,
}

impl Pipeline {
    pub const ALL: [Pipeline; 3] = [Pipeline::LsmStt, Pipeline::SttOnly, Pipeline::LsmOnly];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::LsmStt => "lsm+stt",
            Pipeline::SttOnly => "stt-only",
            Pipeline::LsmOnly => "lsm-only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AblationCell {
    pub mode: RegionMode,
    pub consistency: bool,
    pub pipeline: Pipeline,
}

impl AblationCell {
    pub fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.regions.mode = self.mode;
        cfg.lsm.losses.consistency = self.consistency;
        cfg
    }
}

pub fn ablation_grid() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for mode in [RegionMode::Both, RegionMode::Box, RegionMode::Grid] {
        for consistency in [true, false] {
            for pipeline in Pipeline::ALL {
                cells.push(AblationCell {
                    mode,
                    consistency,
                    pipeline,
                });
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub region_mode: RegionMode,
    pub consistency: bool,
    pub pipeline: Pipeline,
    pub novel_ap50: Option<f64>,
    pub known_ap50: Option<f64>,
    pub generalized_ap50: Option<f64>,
    pub novel_ap: Option<f64>,
    pub error: Option<String>,
}

/// Stage-two settings of the single-stage baseline: without a stage-one
/// alignment to preserve, the projection is trained too.
pub fn stt_only_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.stt.freeze.frozen.remove(&ParamGroup::Projection);
    c
}

/// Trained model for `pipeline` under `cfg` (stage one uses `cfg.regions.mode`).
pub fn train_pipeline(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    pipeline: Pipeline,
) -> Result<Model> {
    let mut model = init_model(cfg, dataset)?;
    match pipeline {
        Pipeline::SttOnly => {
            let c = stt_only_config(cfg);
            train_stt_stage(&c, dataset, &mut model, &mut stt_optimizer(&c))?;
        }
        Pipeline::LsmOnly | Pipeline::LsmStt => {
            train_lsm_stage(
                cfg,
                dataset,
                &mut model,
                &mut lsm_optimizer(cfg),
                |_, _, _| Ok(()),
            )?;
            if pipeline == Pipeline::LsmStt {
                train_stt_stage(cfg, dataset, &mut model, &mut stt_optimizer(cfg))?;
            }
        }
    }
    Ok(model)
}

const ALL_SETUPS: [Setup; 3] = [Setup::Novel, Setup::Known, Setup::Generalized];

fn row(cell: &AblationCell, report: Result<EvalReport>) -> AblationRow {
    let mut row = AblationRow {
        region_mode: cell.mode,
        consistency: cell.consistency,
        pipeline: cell.pipeline,
        novel_ap50: None,
        known_ap50: None,
        generalized_ap50: None,
        novel_ap: None,
        error: None,
    };
    match report {
        Ok(r) => {
            row.novel_ap50 = r.novel.as_ref().map(|b| b.summary.ap50);
            row.novel_ap = r.novel.as_ref().map(|b| b.summary.ap);
            row.known_ap50 = r.known.as_ref().map(|b| b.summary.ap50);
            row.generalized_ap50 = r.generalized.as_ref().map(|b| b.summary.ap50);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Evaluates every cell on the test split. Stage-one models are shared
/// between the cells that need them and stage-two-only training, which does
/// not depend on the cell, runs once. Failures are recorded per cell.
pub fn run_ablation(
    base: &ExperimentConfig,
    dataset: &Dataset,
    cells: &[AblationCell],
) -> Vec<AblationRow> {
    let mut lsm_models: HashMap<(RegionMode, bool), std::result::Result<Model, String>> =
        HashMap::new();
    let mut stt_only: Option<std::result::Result<EvalReport, String>> = None;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let cfg = cell.config(base);
        let eval =
            |m: &Model| evaluate_model(&cfg, m, dataset, Split::Test, &ALL_SETUPS).map(|(r, _)| r);
        let report = match cell.pipeline {
            Pipeline::SttOnly => stt_only
                .get_or_insert_with(|| {
                    train_pipeline(&cfg, dataset, Pipeline::SttOnly)
                        .and_then(|m| eval(&m))
                        .map_err(|e| e.to_string())
                })
                .clone()
                .map_err(Error::Dataset),
            Pipeline::LsmOnly | Pipeline::LsmStt => {
                let lsm = lsm_models
                    .entry((cell.mode, cell.consistency))
                    .or_insert_with(|| {
                        train_pipeline(&cfg, dataset, Pipeline::LsmOnly).map_err(|e| e.to_string())
                    })
                    .clone()
                    .map_err(Error::Dataset);
                lsm.and_then(|mut m| {
                    if cell.pipeline == Pipeline::LsmStt {
                        train_stt_stage(&cfg, dataset, &mut m, &mut stt_optimizer(&cfg))?;
                    }
                    eval(&m)
                })
            }
        };
        rows.push(row(cell, report));
    }
    rows
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let mut s = String::from(
        "region_mode,consistency,pipeline,novel_ap50,known_ap50,generalized_ap50,novel_ap,error\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.region_mode.name(),
            if r.consistency { "on" } else { "off" },
            r.pipeline.name(),
            f(r.novel_ap50),
            f(r.known_ap50),
            f(r.generalized_ap50),
            f(r.novel_ap),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        ));
    }
    s
}

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    dataset_dir: &Path,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let dataset = load_dataset(dataset_dir)?;
    let _lock = DirLock::acquire(out)?;
    let rows = with_threads(|| run_ablation(cfg, &dataset, &ablation_grid()))?;
    std::fs::write(out.join(ABLATION_CSV), ablation_csv(&rows))?;
    Ok(rows)
}

/// Output directory: the explicit flag, else the config's, else `default`.
pub fn resolve_out(flag: Option<PathBuf>, cfg: &ExperimentConfig, default: &str) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(default))
}
