//! Flat `key=value` config files: UTF-8, one pair per line, `#` comments.
//! Unknown keys and malformed values are reported with their line number.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::NetConfig;

/// Training-run settings that live outside the network definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 8,
        }
    }
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        line,
        msg: msg.into(),
    }
}

fn parse_pair(value: &str, line: usize, what: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once(['x', 'X'])
        .ok_or_else(|| bad(line, format!("{what} must look like 4x4, got {value:?}")))?;
    let pa = a
        .trim()
        .parse()
        .map_err(|_| bad(line, format!("bad {what}: {value:?}")))?;
    let pb = b
        .trim()
        .parse()
        .map_err(|_| bad(line, format!("bad {what}: {value:?}")))?;
    Ok((pa, pb))
}

fn parse_num<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| bad(line, format!("bad value for {key}: {value:?}")))
}

fn parse_bool(value: &str, line: usize, key: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(bad(line, format!("bad boolean for {key}: {value:?}"))),
    }
}

/// Parses overrides on top of the 32x32 defaults. Returns the network
/// config and training options.
pub fn parse_config(text: &str) -> Result<(NetConfig, TrainOptions)> {
    let mut cfg = NetConfig::toy32();
    let mut opts = TrainOptions::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| bad(line, format!("expected key=value, got {content:?}")))?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "num_classes" => cfg.num_classes = parse_num(value, line, key)?,
            "input_size" => cfg.input_size = parse_pair(value, line, key)?,
            "c_low" => cfg.c_low = parse_num(value, line, key)?,
            "c_high" => cfg.c_high = parse_num(value, line, key)?,
            "eagr_low.t" => cfg.eagr_low.t_dim = parse_num(value, line, key)?,
            "eagr_low.k" => cfg.eagr_low.k_dim = parse_num(value, line, key)?,
            "eagr_low.grid" => cfg.eagr_low.pool_grid = parse_pair(value, line, key)?,
            "eagr_low.sel" => cfg.eagr_low.central_sel = parse_pair(value, line, key)?,
            "eagr_low.residual" => cfg.eagr_low.residual_reasoning = parse_bool(value, line, key)?,
            "eagr_high.t" => cfg.eagr_high.t_dim = parse_num(value, line, key)?,
            "eagr_high.k" => cfg.eagr_high.k_dim = parse_num(value, line, key)?,
            "eagr_high.grid" => cfg.eagr_high.pool_grid = parse_pair(value, line, key)?,
            "eagr_high.sel" => cfg.eagr_high.central_sel = parse_pair(value, line, key)?,
            "eagr_high.residual" => {
                cfg.eagr_high.residual_reasoning = parse_bool(value, line, key)?
            }
            "lambda1" => cfg.lambda1 = parse_num(value, line, key)?,
            "lambda2" => cfg.lambda2 = parse_num(value, line, key)?,
            "lr" => cfg.lr = parse_num(value, line, key)?,
            "weight_decay" => cfg.weight_decay = parse_num(value, line, key)?,
            "momentum" => cfg.momentum = parse_num(value, line, key)?,
            "seed" => cfg.seed = parse_num(value, line, key)?,
            "epochs" => opts.epochs = parse_num(value, line, key)?,
            "batch_size" => opts.batch_size = parse_num(value, line, key)?,
            _ => return Err(bad(line, format!("unknown key {key:?}"))),
        }
    }
    if opts.batch_size == 0 {
        return Err(bad(0, "batch_size must be positive"));
    }
    cfg.validate().map_err(|e| match e {
        Error::Contract(msg) => bad(0, msg),
        other => other,
    })?;
    Ok((cfg, opts))
}

pub fn parse_config_file(path: &Path) -> Result<(NetConfig, TrainOptions)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Renders a config in the format `parse_config` reads back.
pub fn render_config(cfg: &NetConfig, opts: &TrainOptions) -> String {
    format!(
        "# network\n\
         num_classes={}\n\
         input_size={}x{}\n\
         c_low={}\n\
         c_high={}\n\
         eagr_low.t={}\neagr_low.k={}\neagr_low.grid={}x{}\neagr_low.sel={}x{}\neagr_low.residual={}\n\
         eagr_high.t={}\neagr_high.k={}\neagr_high.grid={}x{}\neagr_high.sel={}x{}\neagr_high.residual={}\n\
         # loss\n\
         lambda1={}\nlambda2={}\n\
         # optimizer\n\
         lr={}\nweight_decay={}\nmomentum={}\n\
         # run\n\
         seed={}\nepochs={}\nbatch_size={}\n",
        cfg.num_classes,
        cfg.input_size.0,
        cfg.input_size.1,
        cfg.c_low,
        cfg.c_high,
        cfg.eagr_low.t_dim,
        cfg.eagr_low.k_dim,
        cfg.eagr_low.pool_grid.0,
        cfg.eagr_low.pool_grid.1,
        cfg.eagr_low.central_sel.0,
        cfg.eagr_low.central_sel.1,
        cfg.eagr_low.residual_reasoning,
        cfg.eagr_high.t_dim,
        cfg.eagr_high.k_dim,
        cfg.eagr_high.pool_grid.0,
        cfg.eagr_high.pool_grid.1,
        cfg.eagr_high.central_sel.0,
        cfg.eagr_high.central_sel.1,
        cfg.eagr_high.residual_reasoning,
        cfg.lambda1,
        cfg.lambda2,
        cfg.lr,
        cfg.weight_decay,
        cfg.momentum,
        cfg.seed,
        opts.epochs,
        opts.batch_size,
    )
}
