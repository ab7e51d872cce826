//! Subcommand implementations.
//!
//! Every command funnels errors into [`CliError`]: input and validation
//! problems exit 2, failures after work has started exit 3. Outputs are
//! deterministic for identical inputs and seeds; the only timestamp lives
//! in a run directory's `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array3;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mitokit::data::{generate_synthetic_dataset, load_image_tensor, load_manifest, DatasetManifest, SynthSpec, Track};
use mitokit::evaluation::{
    detection_f1, report_from_predictions, roc_svg, DomainMetricsReport, DomainRecord,
};
use mitokit::geometry::{load_detections, save_detections, Detection};
use mitokit::inference::{
    ensemble_cls_predict, load_cls_predictions, member_params, merged_member_params,
    predict_detections, save_cls_predictions, Classifier, ClsMember, ClsPrediction, SegMember,
    Segmenter,
};
use mitokit::lora::apply_lora;
use mitokit::models::seg::SegModel;
use mitokit::models::vit::VitModel;
use mitokit::nn::{ParamSnapshot, Params};
use mitokit::splitting::{plan_splits, Fold, FoldPlan, StratKey};
use mitokit::training::{
    run_training_loop, select_ensemble, Checkpoint, ClsFoldTask, ClsTaskConfig, RunLedger,
    SegFoldTask, SegTaskConfig,
};

use crate::cli::{
    EvalArgs, InferArgs, ReportArgs, SplitArgs, SplitChoice, SynthArgs, TrainArgs,
};
use crate::config::RunConfig;

/// Failure classified by exit code: usage/validation (2) or runtime (3).
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<mitokit::Error> for CliError {
    fn from(e: mitokit::Error) -> Self {
        use mitokit::Error as E;
        match e {
            E::Io(_) | E::Json(_) | E::Image(_) | E::NonFiniteLoss { .. } => {
                CliError::Runtime(e.to_string())
            }
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

// ---------------------------------------------------------------- synth

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    let mut spec = SynthSpec::new(args.seed, args.slides, args.patches, args.track.into());
    spec.positive_rate = args.positive_rate;
    spec.patch_size = args.patch_size;
    fs::create_dir_all(&args.out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let manifest = generate_synthetic_dataset(&spec, &args.out)?;
    println!(
        "wrote {} {} records to {}",
        manifest.records.len(),
        manifest.track,
        args.out.join("manifest.jsonl").display()
    );
    Ok(())
}

// ---------------------------------------------------------------- split

pub fn split(args: SplitArgs) -> Result<(), CliError> {
    let manifest = read_manifest(&args.manifest)?;
    let strat: StratKey = match args.strat {
        Some(s) => s.into(),
        None => match manifest.track {
            Track::Detection => StratKey::TissueDomain,
            Track::Classification => StratKey::ClassLabel,
        },
    };
    let plan = plan_splits(
        &manifest,
        args.test_fraction,
        args.k,
        strat,
        args.group.into(),
        args.seed,
    )?;
    plan.validate(&manifest)?;
    write_json_pretty(&plan, &args.out)?;
    println!(
        "wrote {}-fold plan ({} held-out test ids) to {}",
        plan.k,
        plan.test_ids.len(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    // Flag overrides win over the config file.
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(v) = args.max_epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = args.patience {
        cfg.train.patience = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.optimizer.lr = v;
    }
    cfg.validate()?;
    cfg.absolutize()?;

    let manifest = read_manifest(&cfg.run.manifest)?;
    let plan = read_plan(&cfg.run.plan)?;
    plan.validate(&manifest)?;

    let run_root = args
        .run_root
        .or_else(|| std::env::var_os("MITOKIT_RUN_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let name = match args.name {
        Some(n) => n,
        None => args
            .config
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| usage("cannot derive a run name from the config path; pass --name"))?,
    };
    let run_dir = run_root.join(name);
    fs::create_dir_all(&run_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", run_dir.display())))?;
    let run_dir = run_dir
        .canonicalize()
        .map_err(|e| runtime(format!("cannot resolve {}: {e}", run_dir.display())))?;
    cfg.save(&run_dir.join("config.toml"))?;
    write_meta(&run_dir)?;

    let folds: Vec<usize> = match args.fold {
        Some(f) if f >= plan.folds.len() => {
            return Err(usage(format!(
                "fold {f} is out of range: the plan has {} folds",
                plan.folds.len()
            )));
        }
        Some(f) => vec![f],
        None => (0..plan.folds.len()).collect(),
    };

    for f in folds {
        let fold = &plan.folds[f];
        let fold_dir = run_dir.join(format!("fold{f}"));
        let ckpt_dir = fold_dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir)
            .map_err(|e| runtime(format!("cannot create {}: {e}", ckpt_dir.display())))?;
        let ledger = match cfg.run.track {
            Track::Detection => train_detection_fold(&cfg, &manifest, fold, f, &ckpt_dir)?,
            Track::Classification => train_classification_fold(&cfg, &manifest, fold, f, &ckpt_dir)?,
        };
        ledger.save(&fold_dir.join("ledger.json"))?;
        println!(
            "fold {f}: {} epochs, best val loss {:.6} at epoch {}",
            ledger.epochs.len(),
            ledger.best_val_loss,
            ledger.best_epoch
        );
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn train_detection_fold(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    fold: &Fold,
    f: usize,
    ckpt_dir: &Path,
) -> Result<RunLedger, CliError> {
    let seg_cfg = cfg.model.seg.clone().expect("validated");
    let input_size = seg_cfg.input_size;
    let mut params = Params::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let model = SegModel::init(&mut params, &mut rng, seg_cfg)?;
    let mut task_cfg = SegTaskConfig::defaults(input_size, cfg.train.batch_size, cfg.run.seed);
    task_cfg.policy = cfg.augment.clone();
    task_cfg.focal = cfg.focal;
    let mut task = SegFoldTask::new(manifest, &fold.train_ids, &fold.val_ids, model, task_cfg)?;
    Ok(run_training_loop(&mut params, &mut task, &cfg.train, f, ckpt_dir)?)
}

/// Build the classifier exactly as training does: seeded base, optional
/// adapters, trainable head. The same seed reproduces the same frozen base,
/// which is what lets `infer` reconstruct it for checkpoint loading.
fn build_classifier(cfg: &RunConfig, params: &mut Params<f64>) -> Result<VitModel, CliError> {
    let vit_cfg = cfg.model.vit.clone().expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut model = VitModel::init(params, &mut rng, vit_cfg)?;
    if let Some(lora) = &cfg.lora {
        apply_lora(&mut model, params, lora, &mut rng)?;
        for name in model.head_param_names() {
            let id = params.lookup(&name).expect("head parameter exists");
            params.set_trainable(id, true);
        }
    }
    Ok(model)
}

fn train_classification_fold(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    fold: &Fold,
    f: usize,
    ckpt_dir: &Path,
) -> Result<RunLedger, CliError> {
    let input_size = cfg.model.vit.as_ref().expect("validated").image_size;
    let mut params = Params::<f64>::new();
    let model = build_classifier(cfg, &mut params)?;
    let mut task_cfg = ClsTaskConfig::defaults(input_size, cfg.train.batch_size, cfg.run.seed);
    task_cfg.policy = cfg.augment.clone();
    task_cfg.focal = cfg.focal;
    let mut task = ClsFoldTask::new(manifest, &fold.train_ids, &fold.val_ids, model, task_cfg)?;
    Ok(run_training_loop(&mut params, &mut task, &cfg.train, f, ckpt_dir)?)
}

// ---------------------------------------------------------------- infer

pub fn infer(args: InferArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&run_config_path(&args.run_dirs[0])?)?;

    let mut ledgers = Vec::new();
    for dir in &args.run_dirs {
        run_config_path(dir)?; // every directory must be a trained run
        for fold_dir in fold_dirs(dir)? {
            let ledger_path = fold_dir.join("ledger.json");
            if ledger_path.is_file() {
                ledgers.push(RunLedger::load(&ledger_path)?);
            }
        }
    }
    if ledgers.is_empty() {
        return Err(usage(
            "no fold ledgers under the given run directories; train first",
        ));
    }
    let picks = select_ensemble(&ledgers, cfg.train.top_k_checkpoints)?;
    let snapshots: Vec<ParamSnapshot> = picks
        .iter()
        .map(|info| Checkpoint::load(&info.path).map(|c| c.snapshot))
        .collect::<Result<_, _>>()?;

    let manifest = read_manifest(args.manifest.as_ref().unwrap_or(&cfg.run.manifest))?;
    let ids: Vec<String> = match args.split {
        SplitChoice::All => manifest.ids(),
        SplitChoice::Test => {
            let plan = read_plan(args.plan.as_ref().unwrap_or(&cfg.run.plan))?;
            if plan.test_ids.is_empty() {
                return Err(usage(
                    "the plan holds no test ids; pass --split all or a plan with a test fraction",
                ));
            }
            plan.test_ids
        }
    };

    match cfg.run.track {
        Track::Classification => {
            let mut params = Params::<f64>::new();
            let mut model = build_classifier(&cfg, &mut params)?;
            let stores = if cfg.lora.is_some() {
                merged_member_params(&mut model, &params, &snapshots)?
            } else {
                member_params(&params, &snapshots)?
            };
            let members: Vec<ClsMember<'_, f64>> = stores
                .into_iter()
                .map(|p| ClsMember::new(&model, p))
                .collect();
            let refs: Vec<&dyn Classifier<f64>> =
                members.iter().map(|m| m as &dyn Classifier<f64>).collect();
            let policy = args.tta.then(|| cfg.tta.clone().unwrap_or_default());
            let mut rows = Vec::with_capacity(ids.len());
            for id in &ids {
                let rec = lookup(&manifest, id)?;
                let image: Array3<f64> = load_image_tensor(&rec.image_path)?;
                let p = ensemble_cls_predict(&refs, &image, policy.as_ref())?;
                rows.push(ClsPrediction::from_probability(id.clone(), p, rec.domain_id));
            }
            save_cls_predictions(&args.out, &rows)?;
            println!(
                "wrote {} predictions ({} ensemble members{}) to {}",
                rows.len(),
                refs.len(),
                if policy.is_some() { ", test-time augmented" } else { "" },
                args.out.display()
            );
        }
        Track::Detection => {
            if args.tta {
                return Err(usage(
                    "--tta applies to the classification track; detection averages its ensemble per pixel",
                ));
            }
            let seg_cfg = cfg.model.seg.clone().expect("validated");
            let mut params = Params::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
            let model = SegModel::init(&mut params, &mut rng, seg_cfg)?;
            let stores = member_params(&params, &snapshots)?;
            let members: Vec<SegMember<'_, f64>> = stores
                .into_iter()
                .map(|p| SegMember::new(&model, p))
                .collect();
            let refs: Vec<&dyn Segmenter<f64>> =
                members.iter().map(|m| m as &dyn Segmenter<f64>).collect();
            let mut rows: Vec<(String, Detection)> = Vec::new();
            for id in &ids {
                let rec = lookup(&manifest, id)?;
                let image: Array3<f64> = load_image_tensor(&rec.image_path)?;
                for det in predict_detections(&refs, &image, args.threshold, args.min_area_px)? {
                    rows.push((id.clone(), det));
                }
            }
            save_detections(&args.out, &rows)?;
            println!(
                "wrote {} detections across {} patches to {}",
                rows.len(),
                ids.len(),
                args.out.display()
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- eval

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let manifest = read_manifest(&args.manifest)?;
    match manifest.track {
        Track::Classification => {
            let preds = load_cls_predictions(&args.predictions)?;
            if preds.is_empty() {
                return Err(usage(format!(
                    "no predictions in {}",
                    args.predictions.display()
                )));
            }
            let report = report_from_predictions(&preds, &manifest, args.threshold)?;
            if args.by_domain {
                print!("{}", report.render_table());
            } else {
                let m = &report.overall;
                println!(
                    "overall: auc {} accuracy {:.3} sensitivity {:.3} specificity {:.3} balanced accuracy {:.3} ({} pos / {} neg)",
                    m.auc.map_or_else(|| "n/a".into(), |a| format!("{a:.3}")),
                    m.accuracy,
                    m.sensitivity,
                    m.specificity,
                    m.balanced_accuracy,
                    m.n_pos,
                    m.n_neg
                );
            }
            if let Some(dir) = &args.out_dir {
                fs::create_dir_all(dir)
                    .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
                report.save(&dir.join("report.json"))?;
                fs::write(dir.join("report.txt"), report.render_table())
                    .map_err(|e| runtime(format!("cannot write report.txt: {e}")))?;
                match roc_svg(&domain_records(&preds, &manifest)?) {
                    Ok(svg) => {
                        fs::write(dir.join("roc.svg"), svg)
                            .map_err(|e| runtime(format!("cannot write roc.svg: {e}")))?;
                    }
                    Err(_) => eprintln!("note: no two-class domain to plot; skipping roc.svg"),
                }
                println!("report files in {}", dir.display());
            }
        }
        Track::Detection => {
            let preds = load_detections(&args.predictions)?;
            let score = detection_f1(&preds, &manifest, args.radius_px)?;
            println!(
                "precision {:.3} recall {:.3} f1 {:.3} (tp {} fp {} fn {})",
                score.precision,
                score.recall,
                score.f1,
                score.true_positives,
                score.false_positives,
                score.false_negatives
            );
            if let Some(dir) = &args.out_dir {
                fs::create_dir_all(dir)
                    .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
                write_json_pretty(&score, &dir.join("detection_score.json"))?;
                println!("score file in {}", dir.display());
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- report

pub fn report(args: ReportArgs) -> Result<(), CliError> {
    if !args.metrics.is_file() {
        return Err(usage(format!(
            "metrics report not found: {}",
            args.metrics.display()
        )));
    }
    let report = DomainMetricsReport::load(&args.metrics)?;
    print!("{}", report.render_table());
    if let Some(roc_path) = &args.roc {
        let (Some(pred_path), Some(man_path)) = (&args.predictions, &args.manifest) else {
            return Err(usage("--roc needs --predictions and --manifest"));
        };
        let manifest = read_manifest(man_path)?;
        if manifest.track != Track::Classification {
            return Err(usage("ROC curves apply to the classification track"));
        }
        let preds = load_cls_predictions(pred_path)?;
        let svg = roc_svg(&domain_records(&preds, &manifest)?)?;
        fs::write(roc_path, svg)
            .map_err(|e| runtime(format!("cannot write {}: {e}", roc_path.display())))?;
        println!("wrote ROC curves to {}", roc_path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------- shared

fn read_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    if !path.is_file() {
        return Err(usage(format!("manifest not found: {}", path.display())));
    }
    Ok(load_manifest(path)?)
}

fn read_plan(path: &Path) -> Result<FoldPlan, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read plan {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| usage(format!("malformed plan file {}: {e}", path.display())))
}

fn write_json_pretty<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| runtime(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

/// The one place a timestamp is recorded; everything else a command writes
/// is byte-identical across reruns with the same inputs and seeds.
fn write_meta(run_dir: &Path) -> Result<(), CliError> {
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_err(|e| runtime(e.to_string()))?
        .as_secs();
    let meta = serde_json::json!({ "created_unix": created });
    write_json_pretty(&meta, &run_dir.join("meta.json"))
}

fn run_config_path(dir: &Path) -> Result<PathBuf, CliError> {
    let path = dir.join("config.toml");
    if !path.is_file() {
        return Err(usage(format!(
            "{} is not a trained run directory (no config.toml snapshot)",
            dir.display()
        )));
    }
    Ok(path)
}

/// `fold0`, `fold1`, ... subdirectories of a run directory, in fold order.
fn fold_dirs(run_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(run_dir)
        .map_err(|e| usage(format!("cannot read {}: {e}", run_dir.display())))?;
    let mut numbered = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| runtime(e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(index) = name.strip_prefix("fold").and_then(|n| n.parse::<usize>().ok()) {
            if entry.path().is_dir() {
                numbered.push((index, entry.path()));
            }
        }
    }
    numbered.sort_by_key(|(index, _)| *index);
    Ok(numbered.into_iter().map(|(_, path)| path).collect())
}

fn lookup<'m>(
    manifest: &'m DatasetManifest,
    id: &str,
) -> Result<&'m mitokit::data::PatchRecord, CliError> {
    manifest
        .record(id)
        .ok_or_else(|| usage(format!("id `{id}` is not in the manifest")))
}

fn domain_records(
    preds: &[ClsPrediction],
    manifest: &DatasetManifest,
) -> Result<Vec<DomainRecord>, CliError> {
    preds
        .iter()
        .map(|p| {
            let rec = lookup(manifest, &p.patch_id)?;
            let label = rec.class_label.ok_or_else(|| {
                usage(format!("record `{}` has no class label", p.patch_id))
            })?;
            Ok(DomainRecord {
                domain_id: rec.domain_id,
                label,
                probability: p.probability,
            })
        })
        .collect()
}
