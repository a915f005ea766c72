//! Flag parsing, config-file merging and dataset references.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fewshot_core::episodes::{load_image_dataset, read_csv, synth_task_domain, Augment};
use fewshot_core::{BackboneConfig, DatasetTable, Error, HeadKind, OptimizerKind, Result, ShiftConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Parser)]
#[command(name = "fewshot", version, about = "Episodic few-shot classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic domain-shift dataset as CSV.
    Synth(Flags),
    /// Supervised pre-training of a Baseline or Baseline++ model.
    Pretrain(Flags),
    /// Episodic meta-training of a metric or relation head.
    Metatrain(Flags),
    /// Meta-test over novel-class episodes.
    Evaluate(Flags),
    /// Render evaluation reports as a results table.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Pretrain(_) => "pretrain",
            Command::Metatrain(_) => "metatrain",
            Command::Evaluate(_) => "evaluate",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// EvalReport JSON files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Every experiment flag. All are optional so that a `--config` file can
/// supply them; explicit flags win.
#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Flags {
    /// baseline, baseline_pp, matching, proto, relation or subspace.
    #[arg(long)]
    pub head: Option<String>,
    /// identity, mlp:W1,W2,... or conv4:CHANNELS.
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub n_query: Option<usize>,
    /// Meta-training or meta-test episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// adam, radam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training data: CSV file, image directory or synth:key=value,...
    #[arg(long)]
    pub source: Option<String>,
    /// Evaluation data, same forms as --source.
    #[arg(long)]
    pub target: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for evaluation; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Flat JSON file whose keys mirror the flag names.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Checkpoint produced by pretrain or metatrain.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint every this many epochs or episodes.
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Base classes of the source, e.g. 0-19 or 0,2,4.
    #[arg(long)]
    pub source_classes: Option<String>,
    /// Novel classes of the target.
    #[arg(long)]
    pub target_classes: Option<String>,
    /// Training augmentations for image data, e.g. flip,jitter:0.2,crop:32:4.
    #[arg(long)]
    pub augment: Option<String>,
    /// Side length images are resized to.
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub fine_tune_iters: Option<usize>,
    #[arg(long)]
    pub fine_tune_lr: Option<f64>,
    #[arg(long)]
    pub cosine_scale: Option<f64>,
    // Synthetic data.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub nuisance_dims: Option<usize>,
    #[arg(long)]
    pub nuisance_scale: Option<f64>,
    /// Start synthetic parameters from the 40-class shift benchmark.
    #[arg(long)]
    pub benchmark: Option<bool>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl Flags {
    /// Fills unset flags from the `--config` file. Returns warnings for keys
    /// set in both places with different values.
    pub fn merge_config_file(self) -> Result<(Flags, Vec<String>)> {
        let Some(path) = self.config.clone() else {
            return Ok((self, Vec::new()));
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let Value::Object(file) = file else {
            return Err(usage(format!("{}: config must be a flat JSON object", path.display())));
        };
        let mut merged = match serde_json::to_value(&self)? {
            Value::Object(m) => m,
            _ => unreachable!("flags serialize to an object"),
        };
        let mut warnings = Vec::new();
        for (key, value) in file {
            let key = key.replace('_', "-");
            match merged.get(&key) {
                Some(Value::Null) | None => {
                    merged.insert(key, value);
                }
                Some(flag) => {
                    if *flag != value {
                        warnings.push(format!("--{key}={flag} overrides {value} from {}", path.display()));
                    }
                }
            }
        }
        let mut flags: Flags = serde_json::from_value(Value::Object(Map::from_iter(merged)))
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        flags.config = Some(path);
        Ok((flags, warnings))
    }

    pub fn head_kind(&self, default: HeadKind) -> Result<HeadKind> {
        match &self.head {
            Some(h) => h.parse(),
            None => Ok(default),
        }
    }

    pub fn optimizer_kind(&self, default: OptimizerKind) -> Result<OptimizerKind> {
        match &self.optimizer {
            Some(o) => o.parse(),
            None => Ok(default),
        }
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| usage("--seed is required so that every run is reproducible"))
    }

    pub fn augmentations(&self) -> Result<Vec<Augment>> {
        match &self.augment {
            None => Ok(Vec::new()),
            Some(s) => s.split(',').filter(|p| !p.is_empty()).map(str::parse).collect(),
        }
    }

    /// Synthetic parameters from the flags, for the `synth` command.
    pub fn shift_config(&self) -> Result<ShiftConfig> {
        let mut cfg = if self.benchmark == Some(true) {
            ShiftConfig::benchmark()
        } else {
            ShiftConfig::default()
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(classes, samples_per_class, dim, separation, shift, noise, nuisance_dims, nuisance_scale);
        cfg.seed = self.require_seed()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `synth:classes=20,dim=16,shift=0.5,seed=1`. `synth:benchmark` starts from
/// the benchmark preset.
pub fn parse_synth_spec(spec: &str) -> Result<ShiftConfig> {
    let body = spec.strip_prefix("synth:").unwrap_or("");
    let mut cfg = ShiftConfig::default();
    for part in body.split(',').filter(|p| !p.is_empty()) {
        if part == "benchmark" {
            cfg = ShiftConfig { shift: cfg.shift, ..ShiftConfig::benchmark() };
            continue;
        }
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("synthetic spec entry {part:?} is not key=value")))?;
        let bad = |e: &dyn std::fmt::Display| usage(format!("synthetic spec {k}={v}: {e}"));
        match k.replace('-', "_").as_str() {
            "classes" => cfg.classes = v.parse().map_err(|e| bad(&e))?,
            "samples_per_class" | "samples" => cfg.samples_per_class = v.parse().map_err(|e| bad(&e))?,
            "dim" => cfg.dim = v.parse().map_err(|e| bad(&e))?,
            "separation" => cfg.separation = v.parse().map_err(|e| bad(&e))?,
            "shift" => cfg.shift = v.parse().map_err(|e| bad(&e))?,
            "noise" => cfg.noise = v.parse().map_err(|e| bad(&e))?,
            "nuisance_dims" => cfg.nuisance_dims = v.parse().map_err(|e| bad(&e))?,
            "nuisance_scale" => cfg.nuisance_scale = v.parse().map_err(|e| bad(&e))?,
            "seed" => cfg.seed = v.parse().map_err(|e| bad(&e))?,
            other => return Err(usage(format!("unknown synthetic parameter {other:?}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a CSV file, an image directory or a synthetic spec.
pub fn load_dataset(reference: &str, image_size: usize) -> Result<DatasetTable> {
    if reference.starts_with("synth:") || reference == "synth" {
        return synth_task_domain(&parse_synth_spec(reference)?);
    }
    let path = Path::new(reference);
    if path.is_dir() {
        load_image_dataset(path, image_size, image_size)
    } else if path.exists() {
        read_csv(path)
    } else {
        Err(Error::Ingestion(format!("{reference}: no such file or directory")))
    }
}

/// `0-19`, `0,2,4` or a mix such as `0-4,10`.
pub fn parse_class_list(spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || usage(format!("bad class list entry {part:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(usage("class list is empty"));
    }
    Ok(out)
}

/// Resolves a backbone spec against the input shape of the data.
pub fn parse_backbone(spec: &str, input_shape: &[usize]) -> Result<BackboneConfig> {
    let input_len: usize = input_shape.iter().product();
    let (name, args) = spec.split_once(':').unwrap_or((spec, ""));
    let numbers = || -> Result<Vec<usize>> {
        args.split(',')
            .filter(|a| !a.is_empty())
            .map(|a| a.trim().parse().map_err(|_| usage(format!("backbone {spec:?}: {a:?} is not a width"))))
            .collect()
    };
    let cfg = match name {
        "identity" => BackboneConfig::Identity { dim: input_len },
        "mlp" => {
            let hidden = numbers()?;
            if hidden.is_empty() {
                return Err(usage(format!("backbone {spec:?} needs at least one width")));
            }
            let mut widths = vec![input_len];
            widths.extend(hidden);
            BackboneConfig::Mlp { widths }
        }
        "conv4" => {
            let &[h, w, c] = input_shape else {
                return Err(usage(format!("backbone {spec:?} needs image data, got input shape {input_shape:?}")));
            };
            let hidden = match numbers()?.as_slice() {
                [] => 64,
                [x] => *x,
                _ => return Err(usage(format!("backbone {spec:?} takes one channel count"))),
            };
            BackboneConfig::conv4(h, w, c, hidden)
        }
        other => return Err(usage(format!("unknown backbone {other:?} (expected identity, mlp:W,... or conv4:C)"))),
    };
    cfg.validate()?;
    Ok(cfg)
}
