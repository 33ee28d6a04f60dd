//! Command-line surface: gen-synth, train, eval, check-grad, and
//! export-embeddings. Exit codes: 0 success, 1 validation/usage error,
//! 2 runtime error.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datahub::{
    generate_synthetic, load_dataset, save_dataset, DataError, Dataset, SynthConfig,
};
use crate::eval::{evaluate, export_embeddings, EvalError};
use crate::gradcore::{finite_difference_check, GradCheckConfig, Tensor};
use crate::losses::{compute_margins, kda_objective};
use crate::model::{load_checkpoint, KdaModel, ModelConfig, ModelError, UnimodalMode};
use crate::trainer::{fit, TrainConfig, TrainError};

const USAGE: &str = "\
usage: kda <command> [flags]

commands:
  gen-synth           --config <synth.cfg> --out <dir> [--seed <n>]
  train               --features <f.jsonl> --knowledge <k.jsonl> --split <s.json>
                      --config <run.cfg> --out <dir> [--seed <n>]
  eval                --features <f.jsonl> --knowledge <k.jsonl> --split <s.json>
                      --checkpoint <model.kda> [--mode gzsl|zsl|both]
  check-grad          [--seed <n>]
  export-embeddings   --features <f.jsonl> --knowledge <k.jsonl> --split <s.json>
                      --checkpoint <model.kda> --out <file.jsonl>

config files are `key = value` lines; `#` starts a comment.
";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => Self::Runtime(e.to_string()),
            ModelError::Tensor(_) => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Data(DataError::Validation { .. }) => {
                Self::Validation(e.to_string())
            }
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Domain(_) | EvalError::Data(_) => Self::Validation(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

/// Run the CLI against stdout/stderr and return the process exit code.
pub fn run(args: &[String]) -> i32 {
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    run_with_output(args, &mut out, &mut err)
}

/// Run the CLI with explicit output sinks (testable entry point).
pub fn run_with_output(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match dispatch(args, out) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => {
                    let _ = writeln!(err, "error: {msg}");
                    let _ = write!(err, "{USAGE}");
                }
                CliError::Validation(msg) => {
                    let _ = writeln!(err, "error: {msg}");
                }
                CliError::Runtime(msg) => {
                    let _ = writeln!(err, "error: {msg}");
                }
            }
            e.exit_code()
        }
    }
}

fn dispatch(args: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let command = args
        .first()
        .ok_or_else(|| CliError::Usage("missing command".to_string()))?;
    let rest = &args[1..];
    match command.as_str() {
        "gen-synth" => cmd_gen_synth(rest, out),
        "train" => cmd_train(rest, out),
        "eval" => cmd_eval(rest, out),
        "check-grad" => cmd_check_grad(rest, out),
        "export-embeddings" => cmd_export(rest, out),
        "help" | "--help" | "-h" => {
            let _ = write!(out, "{USAGE}");
            Ok(())
        }
        other => Err(CliError::Usage(format!("unknown command '{other}'"))),
    }
}

fn parse_flags(args: &[String], allowed: &[&str]) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let name = arg
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("unexpected argument '{arg}'")))?;
        if !allowed.contains(&name) {
            return Err(CliError::Usage(format!("unknown flag --{name}")));
        }
        let value = args
            .get(i + 1)
            .ok_or_else(|| CliError::Usage(format!("--{name} requires a value")))?;
        if map.insert(name.to_string(), value.clone()).is_some() {
            return Err(CliError::Usage(format!("--{name} given twice")));
        }
        i += 2;
    }
    Ok(map)
}

fn require(map: &BTreeMap<String, String>, key: &str) -> Result<String, CliError> {
    map.get(key)
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("missing required flag --{key}")))
}

/// Parse `key = value` lines; `#` starts a comment.
fn parse_key_values(text: &str, what: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Validation(format!("{what}: line {}: expected key = value", no + 1))
        })?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::Validation(format!(
                "{what}: duplicate key '{key}'"
            )));
        }
    }
    Ok(map)
}

fn read_file(path: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{path}: {e}")))
}

fn take_parsed<T>(
    map: &mut BTreeMap<String, String>,
    key: &str,
    what: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<Option<T>, CliError> {
    match map.remove(key) {
        None => Ok(None),
        Some(raw) => parse(raw.trim())
            .map(Some)
            .ok_or_else(|| CliError::Validation(format!("{what}: bad value '{raw}' for {key}"))),
    }
}

fn reject_leftovers(map: &BTreeMap<String, String>, what: &str) -> Result<(), CliError> {
    if let Some(key) = map.keys().next() {
        return Err(CliError::Validation(format!("{what}: unknown key '{key}'")));
    }
    Ok(())
}

fn cmd_gen_synth(args: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let flags = parse_flags(args, &["config", "out", "seed"])?;
    let config_path = require(&flags, "config")?;
    let out_dir = PathBuf::from(require(&flags, "out")?);
    let mut map = parse_key_values(&read_file(&config_path)?, "synth config")?;

    let mut cfg = SynthConfig::default();
    let int = |s: &str| s.parse::<usize>().ok();
    let float = |s: &str| s.parse::<f64>().ok();
    if let Some(v) = take_parsed(&mut map, "seen_classes", "synth config", int)? {
        cfg.seen_classes = v;
    }
    if let Some(v) = take_parsed(&mut map, "unseen_classes", "synth config", int)? {
        cfg.unseen_classes = v;
    }
    if let Some(v) = take_parsed(&mut map, "samples_per_class", "synth config", int)? {
        cfg.samples_per_class = v;
    }
    if let Some(v) = take_parsed(&mut map, "audio_dim", "synth config", int)? {
        cfg.audio_dim = v;
    }
    if let Some(v) = take_parsed(&mut map, "visual_dim", "synth config", int)? {
        cfg.visual_dim = v;
    }
    if let Some(v) = take_parsed(&mut map, "text_dim", "synth config", int)? {
        cfg.text_dim = v;
    }
    if let Some(v) = take_parsed(&mut map, "cluster_spread", "synth config", float)? {
        cfg.cluster_spread = v;
    }
    if let Some(v) = take_parsed(&mut map, "modality_noise", "synth config", float)? {
        cfg.modality_noise = v;
    }
    if let Some(v) = take_parsed(&mut map, "seed", "synth config", |s| s.parse::<u64>().ok())? {
        cfg.seed = v;
    }
    reject_leftovers(&map, "synth config")?;
    if let Some(seed) = flags.get("seed") {
        cfg.seed = seed
            .parse()
            .map_err(|_| CliError::Usage(format!("bad --seed value '{seed}'")))?;
    }

    let dataset = generate_synthetic(&cfg)?;
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", out_dir.display())))?;
    let features = out_dir.join("features.jsonl");
    let knowledge = out_dir.join("knowledge.jsonl");
    let split = out_dir.join("split.json");
    save_dataset(&dataset, &features, &knowledge, &split)?;
    let _ = writeln!(
        out,
        "wrote {} samples, {} classes ({} seen / {} unseen) to {}",
        dataset.records.len(),
        dataset.knowledge.len(),
        cfg.seen_classes,
        cfg.unseen_classes,
        out_dir.display()
    );
    Ok(())
}

fn load_dataset_flags(flags: &BTreeMap<String, String>) -> Result<Dataset, CliError> {
    let features = require(flags, "features")?;
    let knowledge = require(flags, "knowledge")?;
    let split = require(flags, "split")?;
    Ok(load_dataset(
        Path::new(&features),
        Path::new(&knowledge),
        Path::new(&split),
    )?)
}

fn cmd_train(args: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let flags = parse_flags(
        args,
        &["features", "knowledge", "split", "config", "out", "seed"],
    )?;
    let dataset = load_dataset_flags(&flags)?;
    let config_path = require(&flags, "config")?;
    let out_dir = PathBuf::from(require(&flags, "out")?);
    let mut map = parse_key_values(&read_file(&config_path)?, "run config")?;

    let mut train_cfg = TrainConfig::default();
    train_cfg.apply_map(&mut map)?;

    let mut model_cfg = ModelConfig {
        audio_dim: dataset.audio_dim,
        visual_dim: dataset.visual_dim,
        text_dim: dataset.text_dim,
        ..ModelConfig::default()
    };
    let int = |s: &str| s.parse::<usize>().ok();
    let float = |s: &str| s.parse::<f64>().ok();
    if let Some(v) = take_parsed(&mut map, "hidden_dim", "run config", int)? {
        model_cfg.hidden_dim = v;
    }
    if let Some(v) = take_parsed(&mut map, "common_dim", "run config", int)? {
        model_cfg.common_dim = v;
    }
    if let Some(v) = take_parsed(&mut map, "dropout_enc", "run config", float)? {
        model_cfg.dropout_enc = v;
    }
    if let Some(v) = take_parsed(&mut map, "dropout_proj", "run config", float)? {
        model_cfg.dropout_proj = v;
    }
    if let Some(v) = take_parsed(&mut map, "dropout_dec", "run config", float)? {
        model_cfg.dropout_dec = v;
    }
    if let Some(v) = take_parsed(&mut map, "unimodal_mode", "run config", UnimodalMode::parse)? {
        model_cfg.unimodal = v;
    }
    reject_leftovers(&map, "run config")?;
    if let Some(seed) = flags.get("seed") {
        train_cfg.seed = seed
            .parse()
            .map_err(|_| CliError::Usage(format!("bad --seed value '{seed}'")))?;
    }

    let mut model = KdaModel::init(model_cfg, train_cfg.seed)?;
    let report = fit(&mut model, &dataset, &train_cfg, Some(&out_dir))?;
    let final_eval = evaluate(&model, &dataset)?;
    let _ = writeln!(
        out,
        "trained {} epochs in {:.1}s; best HM at epoch {}",
        report.epochs.len(),
        report.wall_seconds,
        report.best_epoch
    );
    if let Some(ckpt) = &report.best_checkpoint {
        let _ = writeln!(out, "checkpoint: {}", ckpt.display());
    }
    let _ = writeln!(out, "{}", final_eval.metrics_line());
    Ok(())
}

fn cmd_eval(args: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let flags = parse_flags(
        args,
        &["features", "knowledge", "split", "checkpoint", "mode"],
    )?;
    let dataset = load_dataset_flags(&flags)?;
    let checkpoint = require(&flags, "checkpoint")?;
    let mode = flags.get("mode").map(String::as_str).unwrap_or("both");
    if !["gzsl", "zsl", "both"].contains(&mode) {
        return Err(CliError::Usage(format!(
            "bad --mode '{mode}' (expected gzsl, zsl, or both)"
        )));
    }
    let model = load_checkpoint(Path::new(&checkpoint))?;
    for (name, model_dim, data_dim) in [
        ("audio_dim", model.config.audio_dim, dataset.audio_dim),
        ("visual_dim", model.config.visual_dim, dataset.visual_dim),
        ("text_dim", model.config.text_dim, dataset.text_dim),
    ] {
        if model_dim != data_dim {
            return Err(CliError::Validation(format!(
                "checkpoint {name} = {model_dim} but dataset has {data_dim}"
            )));
        }
    }
    let result = evaluate(&model, &dataset)?;
    let line = match mode {
        "gzsl" => format!(
            "S={:.2} U={:.2} HM={:.2}",
            result.s * 100.0,
            result.u * 100.0,
            result.hm * 100.0
        ),
        "zsl" => format!("ZSL={:.2}", result.zsl * 100.0),
        _ => result.metrics_line(),
    };
    let _ = writeln!(out, "{line}");
    Ok(())
}

fn cmd_check_grad(args: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let flags = parse_flags(args, &["seed"])?;
    let seed: u64 = match flags.get("seed") {
        Some(s) => s
            .parse()
            .map_err(|_| CliError::Usage(format!("bad --seed value '{s}'")))?,
        None => 0,
    };
    let config = ModelConfig {
        audio_dim: 5,
        visual_dim: 4,
        text_dim: 3,
        hidden_dim: 6,
        common_dim: 4,
        dropout_enc: 0.0,
        dropout_proj: 0.0,
        dropout_dec: 0.0,
        unimodal: UnimodalMode::Both,
    };
    let model = KdaModel::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut sample = |rows: usize, cols: usize| -> Result<Tensor, CliError> {
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(vec![rows, cols], data).map_err(|e| CliError::Runtime(e.to_string()))
    };
    let (b, c) = (4, 3);
    let audio = sample(b, 5)?;
    let visual = sample(b, 4)?;
    let knowledge = sample(c, 3)?;
    let labels = vec![0usize, 1, 2, 1];

    // margins from the current knowledge embeddings, detached
    let mut g = crate::gradcore::Graph::new();
    let embedded = model
        .embed_knowledge::<ChaCha8Rng>(&mut g, &knowledge, None)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let d = embedded.cols();
    let data = embedded.to_vec();
    let per_class: Vec<Vec<Vec<f64>>> = (0..c)
        .map(|k| vec![data[k * d..(k + 1) * d].to_vec()])
        .collect();
    let margins =
        compute_margins(&per_class, 1.0, 0.2).map_err(|e| CliError::Runtime(e.to_string()))?;

    let report = finite_difference_check(
        &model.trainable_parameters(),
        GradCheckConfig::default(),
        |g| {
            let fo = model.forward_eval(g, &audio, &visual, &knowledge)?;
            Ok(kda_objective(g, &fo.rho_av, &fo.rho_t, &labels, &margins, 1.0)?.total)
        },
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let _ = writeln!(out, "{}", report.summary());
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Runtime(
            "finite-difference gradient check failed".to_string(),
        ))
    }
}

fn cmd_export(args: &[String], out: &mut dyn Write) -> Result<(), CliError> {
    let flags = parse_flags(
        args,
        &["features", "knowledge", "split", "checkpoint", "out"],
    )?;
    let dataset = load_dataset_flags(&flags)?;
    let checkpoint = require(&flags, "checkpoint")?;
    let out_path = PathBuf::from(require(&flags, "out")?);
    let model = load_checkpoint(Path::new(&checkpoint))?;
    export_embeddings(&model, &dataset, &out_path)?;
    let rows = dataset.records.len() + dataset.knowledge.len();
    let _ = writeln!(out, "wrote {rows} rows to {}", out_path.display());
    Ok(())
}
