//! Run configuration: a flat-sectioned `key = value` text format that any
//! language can parse without a schema library, with JSON accepted as an
//! alternate input. Unknown sections or keys are rejected; omitted fields
//! fall back to the architecture and training defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XError};
use crate::network::{Ablation, BcuMode, XformerConfig};
use crate::train::{ProgressivePhase, TrainPlan};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPaths {
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: XformerConfig,
    pub train: TrainPlan,
    pub paths: RunPaths,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

fn cfg_err(line_no: usize, msg: impl std::fmt::Display) -> XError {
    XError::Config(format!("line {line_no}: {msg}"))
}

fn parse_kv<'a>(line: &'a str, line_no: usize) -> Result<(&'a str, &'a str)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| cfg_err(line_no, format!("expected 'key = value', got '{line}'")))?;
    Ok((k.trim(), v.trim()))
}

fn parse_num<T: std::str::FromStr>(v: &str, line_no: usize, what: &str) -> Result<T> {
    v.parse()
        .map_err(|_| cfg_err(line_no, format!("invalid {what} '{v}'")))
}

fn parse_bool(v: &str, line_no: usize) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(cfg_err(line_no, format!("expected true/false, got '{other}'"))),
    }
}

fn parse_seven(v: &str, line_no: usize) -> Result<[usize; 7]> {
    let items: Vec<usize> = v
        .split(',')
        .map(|s| parse_num(s.trim(), line_no, "integer"))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| cfg_err(line_no, "expected exactly 7 comma-separated integers"))
}

fn parse_progressive(v: &str, line_no: usize) -> Result<Vec<ProgressivePhase>> {
    v.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(cfg_err(
                    line_no,
                    format!("expected start:batch:patch, got '{item}'"),
                ));
            }
            Ok(ProgressivePhase {
                start_iter: parse_num(parts[0], line_no, "iteration")?,
                batch: parse_num(parts[1], line_no, "batch size")?,
                patch: parse_num(parts[2], line_no, "patch size")?,
            })
        })
        .collect()
}

/// Parses the sectioned text format. `#` starts a comment.
pub fn parse_text(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.split_once('#') {
            Some((before, _)) => before.trim(),
            None => raw.trim(),
        };
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| cfg_err(line_no, "unterminated section header"))?;
            match name {
                "model" | "train" | "paths" => section = name.to_string(),
                other => return Err(cfg_err(line_no, format!("unknown section '{other}'"))),
            }
            continue;
        }
        let (key, value) = parse_kv(line, line_no)?;
        match section.as_str() {
            "model" => apply_model_key(&mut cfg.model, key, value, line_no)?,
            "train" => apply_train_key(&mut cfg.train, key, value, line_no)?,
            "paths" => apply_path_key(&mut cfg.paths, key, value, line_no)?,
            _ => {
                return Err(cfg_err(
                    line_no,
                    format!("key '{key}' appears before any [section]"),
                ))
            }
        }
    }
    Ok(cfg)
}

fn apply_model_key(m: &mut XformerConfig, key: &str, v: &str, ln: usize) -> Result<()> {
    match key {
        "in_channels" => m.in_channels = parse_num(v, ln, "integer")?,
        "base_channels" => m.base_channels = parse_num(v, ln, "integer")?,
        "depths" => m.depths = parse_seven(v, ln)?,
        "heads" => m.heads = parse_seven(v, ln)?,
        "refinement_depth" => m.refinement_depth = parse_num(v, ln, "integer")?,
        "refinement_heads" => m.refinement_heads = parse_num(v, ln, "integer")?,
        "window" => m.window = parse_num(v, ln, "integer")?,
        "ffn_expansion" => m.ffn_expansion = parse_num(v, ln, "number")?,
        "shifted" => m.shifted = parse_bool(v, ln)?,
        "ablation" => {
            m.ablation = match v {
                "dual" => Ablation::Dual,
                "all_stb" => Ablation::AllStb,
                "all_ctb" => Ablation::AllCtb,
                other => return Err(cfg_err(ln, format!("unknown ablation '{other}'"))),
            }
        }
        "bcu_mode" => {
            m.bcu_mode = match v {
                "full" => BcuMode::Full,
                "dw_only" => BcuMode::DwOnly,
                "conv_only" => BcuMode::ConvOnly,
                "off" => BcuMode::Off,
                other => return Err(cfg_err(ln, format!("unknown bcu_mode '{other}'"))),
            }
        }
        other => return Err(cfg_err(ln, format!("unknown model key '{other}'"))),
    }
    Ok(())
}

fn apply_train_key(t: &mut TrainPlan, key: &str, v: &str, ln: usize) -> Result<()> {
    match key {
        "total_iters" => t.total_iters = parse_num(v, ln, "integer")?,
        "lr0" => t.lr0 = parse_num(v, ln, "number")?,
        "lr_min" => t.lr_min = parse_num(v, ln, "number")?,
        "beta1" => t.beta1 = parse_num(v, ln, "number")?,
        "beta2" => t.beta2 = parse_num(v, ln, "number")?,
        "weight_decay" => t.weight_decay = parse_num(v, ln, "number")?,
        "progressive" => t.progressive = parse_progressive(v, ln)?,
        "noise_sigma" => t.noise_sigma = parse_num(v, ln, "number")?,
        "seed" => t.seed = parse_num(v, ln, "integer")?,
        "val_interval" => t.val_interval = parse_num(v, ln, "integer")?,
        "checkpoint_interval" => t.checkpoint_interval = parse_num(v, ln, "integer")?,
        other => return Err(cfg_err(ln, format!("unknown train key '{other}'"))),
    }
    Ok(())
}

fn apply_path_key(p: &mut RunPaths, key: &str, v: &str, ln: usize) -> Result<()> {
    match key {
        "data" => p.data = Some(PathBuf::from(v)),
        "val" => p.val = Some(PathBuf::from(v)),
        "checkpoint" => p.checkpoint = Some(PathBuf::from(v)),
        "output" => p.output = Some(PathBuf::from(v)),
        other => return Err(cfg_err(ln, format!("unknown paths key '{other}'"))),
    }
    Ok(())
}

/// Canonical text serialization; `parse_text(to_text(c)) == c`.
pub fn to_text(cfg: &RunConfig) -> String {
    let m = &cfg.model;
    let t = &cfg.train;
    let mut out = String::new();
    out.push_str("[model]\n");
    out.push_str(&format!("in_channels = {}\n", m.in_channels));
    out.push_str(&format!("base_channels = {}\n", m.base_channels));
    let join = |v: &[usize]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    out.push_str(&format!("depths = {}\n", join(&m.depths)));
    out.push_str(&format!("heads = {}\n", join(&m.heads)));
    out.push_str(&format!("refinement_depth = {}\n", m.refinement_depth));
    out.push_str(&format!("refinement_heads = {}\n", m.refinement_heads));
    out.push_str(&format!("window = {}\n", m.window));
    out.push_str(&format!("ffn_expansion = {}\n", m.ffn_expansion));
    out.push_str(&format!("shifted = {}\n", m.shifted));
    out.push_str(&format!(
        "ablation = {}\n",
        match m.ablation {
            Ablation::Dual => "dual",
            Ablation::AllStb => "all_stb",
            Ablation::AllCtb => "all_ctb",
        }
    ));
    out.push_str(&format!(
        "bcu_mode = {}\n",
        match m.bcu_mode {
            BcuMode::Full => "full",
            BcuMode::DwOnly => "dw_only",
            BcuMode::ConvOnly => "conv_only",
            BcuMode::Off => "off",
        }
    ));
    out.push_str("\n[train]\n");
    out.push_str(&format!("total_iters = {}\n", t.total_iters));
    out.push_str(&format!("lr0 = {}\n", t.lr0));
    out.push_str(&format!("lr_min = {}\n", t.lr_min));
    out.push_str(&format!("beta1 = {}\n", t.beta1));
    out.push_str(&format!("beta2 = {}\n", t.beta2));
    out.push_str(&format!("weight_decay = {}\n", t.weight_decay));
    let phases = t
        .progressive
        .iter()
        .map(|p| format!("{}:{}:{}", p.start_iter, p.batch, p.patch))
        .collect::<Vec<_>>()
        .join(",");
    out.push_str(&format!("progressive = {phases}\n"));
    out.push_str(&format!("noise_sigma = {}\n", t.noise_sigma));
    out.push_str(&format!("seed = {}\n", t.seed));
    out.push_str(&format!("val_interval = {}\n", t.val_interval));
    out.push_str(&format!("checkpoint_interval = {}\n", t.checkpoint_interval));
    out.push_str("\n[paths]\n");
    for (k, v) in [
        ("data", &cfg.paths.data),
        ("val", &cfg.paths.val),
        ("checkpoint", &cfg.paths.checkpoint),
        ("output", &cfg.paths.output),
    ] {
        if let Some(p) = v {
            out.push_str(&format!("{k} = {}\n", p.display()));
        }
    }
    out
}

/// Parses either format: JSON when the first non-space byte is `{`,
/// otherwise the sectioned text grammar.
pub fn parse(text: &str) -> Result<RunConfig> {
    if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| XError::Config(format!("json: {e}")))
    } else {
        parse_text(text)
    }
}

pub fn load(path: &std::path::Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| XError::io(path.display().to_string(), e))?;
    let cfg = parse(&text)?;
    cfg.validate()?;
    Ok(cfg)
}
