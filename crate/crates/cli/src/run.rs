//! Command execution.

use std::fs;
use std::path::{Path, PathBuf};

use fewshot_core::episodes::write_csv;
use fewshot_core::evaluation::{meta_test, EvalReport, MetaTestConfig};
use fewshot_core::{
    build_backbone, fingerprint, Backbone, Checkpoint, DatasetTable, Error, HeadConfig, HeadKind, OptimizerConfig,
    OptimizerKind, Result, TrainSchedule,
};
use serde_json::{json, Value};

use crate::config::{load_dataset, parse_backbone, parse_class_list, Command, Flags, ReportArgs};
use crate::table::render_table;

pub const DEFAULT_IMAGE_SIZE: usize = 32;

/// What a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    /// Human-readable summary for stdout.
    pub summary: String,
    pub warnings: Vec<String>,
}

/// 2 usage, 3 data, 4 numerical divergence.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 4,
        _ => 3,
    }
}

pub fn run(command: Command) -> Result<Outcome> {
    let name = command.name();
    match command {
        Command::Report(args) => report(args),
        Command::Synth(f) | Command::Pretrain(f) | Command::Metatrain(f) | Command::Evaluate(f) => {
            let (flags, warnings) = f.merge_config_file()?;
            let mut out = match name {
                "synth" => synth(&flags),
                "pretrain" => pretrain(&flags),
                "metatrain" => metatrain(&flags),
                _ => evaluate(&flags),
            }?;
            out.warnings.splice(0..0, warnings);
            Ok(out)
        }
    }
}

fn out_dir(flags: &Flags) -> Result<PathBuf> {
    let dir = flags.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn artifact(dir: &Path, command: &str, fp: &str, ext: &str) -> PathBuf {
    dir.join(format!("{command}-{fp}.{ext}"))
}

fn check_episode_shape(n: usize, k: usize, q: usize) -> Result<()> {
    if n < 2 || k < 1 || q < 1 {
        return Err(Error::Config(format!("need N >= 2, K >= 1 and Q >= 1, got N={n} K={k} Q={q}")));
    }
    Ok(())
}

fn optimizer(flags: &Flags, kind: OptimizerKind, lr: f64) -> Result<OptimizerConfig> {
    let lr = flags.lr.unwrap_or(lr);
    let cfg = match flags.optimizer_kind(kind)? {
        OptimizerKind::Adam => OptimizerConfig::adam(lr),
        OptimizerKind::Radam => OptimizerConfig::radam(lr),
        OptimizerKind::Sgd => OptimizerConfig::sgd(lr),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn head_config(flags: &Flags, base: HeadConfig) -> Result<HeadConfig> {
    let mut h = base;
    if let Some(i) = flags.fine_tune_iters {
        h.fine_tune_iterations = i;
    }
    if let Some(lr) = flags.fine_tune_lr {
        h.fine_tune_lr = lr;
    }
    if let Some(s) = flags.cosine_scale {
        h.cosine_scale = s;
    }
    h.validate()?;
    Ok(h)
}

/// Loads `reference` and keeps `classes` if given.
fn dataset(reference: Option<&str>, classes: Option<&str>, flag: &str, image_size: usize) -> Result<(DatasetTable, Value)> {
    let reference = reference.ok_or_else(|| Error::Config(format!("--{flag} is required")))?;
    let data = load_dataset(reference, image_size)?;
    let (data, list) = match classes {
        Some(spec) => {
            let list = parse_class_list(spec)?;
            (data.subset(&list)?, json!(list))
        }
        None => (data, Value::Null),
    };
    let description = json!({"reference": reference, "classes": list, "domain": data.domain_name()});
    Ok((data, description))
}

fn fresh_backbone(flags: &Flags, data: &DatasetTable, default: &str, seed: u64) -> Result<Backbone> {
    let spec = flags.backbone.as_deref().unwrap_or(default);
    build_backbone(parse_backbone(spec, data.input_shape())?, seed)
}

fn load_checkpoint(flags: &Flags, warnings: &mut Vec<String>) -> Result<Option<Checkpoint>> {
    let Some(path) = &flags.checkpoint else {
        return Ok(None);
    };
    let ckpt = Checkpoint::load(path)?;
    if flags.backbone.is_some() {
        warnings.push(format!("--backbone ignored: the backbone comes from {}", path.display()));
    }
    Ok(Some(ckpt))
}

fn synth(flags: &Flags) -> Result<Outcome> {
    let cfg = flags.shift_config()?;
    let data = fewshot_core::episodes::synth_task_domain(&cfg)?;
    let resolved = json!({"command": "synth", "synth": cfg});
    let fp = fingerprint(&resolved);
    let path = artifact(&out_dir(flags)?, "synth", &fp, "csv");
    let mut buf = Vec::new();
    write_csv(&data, &mut buf)?;
    fs::write(&path, buf)?;
    Ok(Outcome {
        summary: format!("{} items, {} classes, {} features -> {}", data.len(), data.n_classes(), data.input_len(), path.display()),
        artifacts: vec![path],
        warnings: Vec::new(),
    })
}

fn pretrain(flags: &Flags) -> Result<Outcome> {
    let seed = flags.require_seed()?;
    let image_size = flags.image_size.unwrap_or(DEFAULT_IMAGE_SIZE);
    let (data, source) = dataset(flags.source.as_deref(), flags.source_classes.as_deref(), "source", image_size)?;
    let kind = flags.head_kind(HeadKind::Baseline)?;
    if !kind.is_baseline() {
        return Err(Error::Config(format!("pretrain trains baseline or baseline_pp heads, not {kind}; use metatrain")));
    }
    let head = head_config(flags, HeadConfig::new(kind))?;
    let mut warnings = Vec::new();
    let backbone = match load_checkpoint(flags, &mut warnings)? {
        Some(c) => c.backbone,
        None => fresh_backbone(flags, &data, "mlp:64,64", seed)?,
    };
    let mut schedule = TrainSchedule::pretrain(flags.epochs.unwrap_or(10), seed);
    schedule.batch_size = flags.batch_size.unwrap_or(schedule.batch_size);
    schedule.optimizer = optimizer(flags, OptimizerKind::Radam, 1e-3)?;
    schedule.checkpoint_interval = flags.checkpoint_interval;
    schedule.augment = flags.augmentations()?;
    let dir = out_dir(flags)?;
    schedule.checkpoint_dir = Some(dir.clone());

    let resolved = json!({
        "command": "pretrain",
        "head": head,
        "backbone": backbone.config,
        "backbone_checksum": format!("{:016x}", backbone.params.checksum()),
        "source": source,
        "epochs": schedule.steps,
        "batch_size": schedule.batch_size,
        "optimizer": schedule.optimizer,
        "augment": flags.augment,
        "checkpoint_interval": schedule.checkpoint_interval,
        "seed": seed,
    });
    let fp = fingerprint(&resolved);
    schedule.fingerprint = fp.clone();
    let (backbone, state, log) = fewshot_core::pretrain_baseline(backbone, &head, &data, &schedule)?;

    let mut ckpt = Checkpoint::new(&fp, "pretrain", schedule.steps, backbone);
    ckpt.head = Some(head);
    ckpt.head_state = Some(state);
    let ckpt_path = artifact(&dir, "pretrain", &fp, "json");
    ckpt.save(&ckpt_path)?;
    let log_path = artifact(&dir, "pretrain", &fp, "csv");
    fs::write(&log_path, log.to_csv())?;
    let last = log.records.last();
    Ok(Outcome {
        summary: format!(
            "pretrained {} epochs, final loss {:.4}, training accuracy {:.2}% -> {}",
            schedule.steps,
            last.map_or(f64::NAN, |r| r.loss),
            100.0 * last.and_then(|r| r.accuracy).unwrap_or(0.0),
            ckpt_path.display()
        ),
        artifacts: vec![ckpt_path, log_path],
        warnings,
    })
}

fn metatrain(flags: &Flags) -> Result<Outcome> {
    let seed = flags.require_seed()?;
    let image_size = flags.image_size.unwrap_or(DEFAULT_IMAGE_SIZE);
    let (data, source) = dataset(flags.source.as_deref(), flags.source_classes.as_deref(), "source", image_size)?;
    let kind = flags.head_kind(HeadKind::Proto)?;
    if kind.is_baseline() {
        return Err(Error::Config(format!("{kind} heads are trained with pretrain")));
    }
    let head = head_config(flags, HeadConfig::new(kind))?;
    let (n, k, q) = (flags.n_way.unwrap_or(5), flags.k_shot.unwrap_or(5), flags.n_query.unwrap_or(8));
    check_episode_shape(n, k, q)?;
    let mut warnings = Vec::new();
    let backbone = match load_checkpoint(flags, &mut warnings)? {
        Some(c) => c.backbone,
        None => fresh_backbone(flags, &data, "mlp:64,64", seed)?,
    };
    let mut schedule = TrainSchedule::meta_train(flags.episodes.unwrap_or(2000), seed);
    schedule.optimizer = optimizer(flags, OptimizerKind::Adam, 1e-3)?;
    schedule.checkpoint_interval = flags.checkpoint_interval;
    schedule.augment = flags.augmentations()?;
    let dir = out_dir(flags)?;
    schedule.checkpoint_dir = Some(dir.clone());

    let resolved = json!({
        "command": "metatrain",
        "head": head,
        "backbone": backbone.config,
        "backbone_checksum": format!("{:016x}", backbone.params.checksum()),
        "source": source,
        "n_way": n,
        "k_shot": k,
        "n_query": q,
        "episodes": schedule.steps,
        "optimizer": schedule.optimizer,
        "augment": flags.augment,
        "checkpoint_interval": schedule.checkpoint_interval,
        "seed": seed,
    });
    let fp = fingerprint(&resolved);
    schedule.fingerprint = fp.clone();
    let trained = fewshot_core::meta_train(&head, backbone, &data, n, k, q, &schedule)?;

    let mut ckpt = Checkpoint::new(&fp, "meta_train", schedule.steps, trained.backbone);
    ckpt.head = Some(head);
    ckpt.relation = trained.relation;
    let ckpt_path = artifact(&dir, "metatrain", &fp, "json");
    ckpt.save(&ckpt_path)?;
    let log_path = artifact(&dir, "metatrain", &fp, "csv");
    fs::write(&log_path, trained.log.to_csv())?;
    let last = trained.log.records.last();
    Ok(Outcome {
        summary: format!(
            "meta-trained {} episodes, final loss {:.4} -> {}",
            schedule.steps,
            last.map_or(f64::NAN, |r| r.loss),
            ckpt_path.display()
        ),
        artifacts: vec![ckpt_path, log_path],
        warnings,
    })
}

fn evaluate(flags: &Flags) -> Result<Outcome> {
    let seed = flags.require_seed()?;
    let image_size = flags.image_size.unwrap_or(DEFAULT_IMAGE_SIZE);
    let (data, target) = dataset(flags.target.as_deref(), flags.target_classes.as_deref(), "target", image_size)?;
    let (n, k, q) = (flags.n_way.unwrap_or(5), flags.k_shot.unwrap_or(5), flags.n_query.unwrap_or(8));
    check_episode_shape(n, k, q)?;
    let mut warnings = Vec::new();
    let ckpt = load_checkpoint(flags, &mut warnings)?;
    let (backbone, head, relation, ckpt_fp) = match ckpt {
        Some(c) => {
            let kind = flags.head_kind(c.head.as_ref().map_or(HeadKind::Proto, |h| h.kind))?;
            let base = c.head.clone().filter(|h| h.kind == kind).unwrap_or_else(|| HeadConfig::new(kind));
            (c.backbone, head_config(flags, base)?, c.relation, Some(c.fingerprint))
        }
        None => {
            let kind = flags.head_kind(HeadKind::Proto)?;
            (fresh_backbone(flags, &data, "identity", seed)?, head_config(flags, HeadConfig::new(kind))?, None, None)
        }
    };
    let mut cfg = MetaTestConfig::new(n, k, q, flags.episodes.unwrap_or(600), seed);
    cfg.threads = flags.threads.unwrap_or(0);

    let mut report: EvalReport = meta_test(&backbone, &head, relation.as_ref(), &data, &cfg)?;
    let mut resolved = json!({
        "command": "evaluate",
        "head": head,
        "backbone": backbone.config,
        "backbone_checksum": format!("{:016x}", backbone.params.checksum()),
        "relation_checksum": relation.as_ref().map(|r| format!("{:016x}", r.checksum())),
        "checkpoint": ckpt_fp,
        "target": target,
        "n_way": n,
        "k_shot": k,
        "n_query": q,
        "episodes": cfg.episodes,
        "seed": seed,
    });
    let fp = fingerprint(&resolved);
    resolved["fingerprint"] = json!(fp);
    report.config = resolved;
    report.check_invariants(q)?;

    let dir = out_dir(flags)?;
    let json_path = artifact(&dir, "evaluate", &fp, "json");
    fs::write(&json_path, report.to_json()?)?;
    let csv_path = artifact(&dir, "evaluate", &fp, "csv");
    fs::write(&csv_path, report.confusion_csv())?;
    let mut summary = format!(
        "{} {n}-way {k}-shot over {} episodes: {} -> {}",
        head.kind.display_name(),
        report.n_episodes,
        fewshot_core::format_cell(report.mean_accuracy, report.ci95_half_width),
        json_path.display()
    );
    for flag in &report.flags {
        summary.push_str(&format!("\nnote: {flag}"));
    }
    Ok(Outcome {
        summary,
        artifacts: vec![json_path, csv_path],
        warnings,
    })
}

fn report(args: ReportArgs) -> Result<Outcome> {
    let mut reports = Vec::new();
    for p in &args.reports {
        let text = fs::read_to_string(p).map_err(|e| Error::Ingestion(format!("{}: {e}", p.display())))?;
        reports.push(EvalReport::from_json(&text).map_err(|e| Error::Ingestion(format!("{}: {e}", p.display())))?);
    }
    let table = render_table(&reports);
    let fps: Vec<Value> = reports.iter().map(|r| json!(r.fingerprint())).collect();
    let fp = fingerprint(&json!({"command": "report", "reports": fps}));
    let dir = args.out.unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let csv_path = artifact(&dir, "report", &fp, "csv");
    fs::write(&csv_path, &table.csv)?;
    Ok(Outcome {
        summary: table.text.trim_end().to_string(),
        artifacts: vec![csv_path],
        warnings: Vec::new(),
    })
}
