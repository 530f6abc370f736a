//! Architecture config: a JSON object with `scale`, `backbone` and `head`,
//! each layer written as `[from, repeats, block, args...]`.

use std::fmt;
use std::str::FromStr;

use serde_json::{json, Value};

use crate::error::{Error, ParseErrorKind, Result};

pub const YOLO11N_CONFIG: &str = include_str!("../../configs/yolo11n.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    /// The network input (only valid for the first layer).
    Input,
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    Conv { c_out: usize, k: usize, s: usize },
    GhostConv { c_out: usize, k: usize, s: usize },
    C3k2 { c_out: usize, c3k: bool, e: f64, shortcut: bool },
    C2f { c_out: usize, shortcut: bool, e: f64 },
    Sppf { c_out: usize, k: usize },
    C2psa { c_out: usize },
    Upsample { scale: usize },
    Concat { dim: usize },
    Detect { nc: usize, reg_max: usize },
}

impl Block {
    pub const NAMES: [&'static str; 9] =
        ["Conv", "GhostConv", "C3k2", "C2f", "SPPF", "C2PSA", "Upsample", "Concat", "Detect"];

    pub fn name(&self) -> &'static str {
        match self {
            Block::Conv { .. } => "Conv",
            Block::GhostConv { .. } => "GhostConv",
            Block::C3k2 { .. } => "C3k2",
            Block::C2f { .. } => "C2f",
            Block::Sppf { .. } => "SPPF",
            Block::C2psa { .. } => "C2PSA",
            Block::Upsample { .. } => "Upsample",
            Block::Concat { .. } => "Concat",
            Block::Detect { .. } => "Detect",
        }
    }

    fn args_json(&self) -> Vec<Value> {
        match *self {
            Block::Conv { c_out, k, s } | Block::GhostConv { c_out, k, s } => vec![json!(c_out), json!(k), json!(s)],
            Block::C3k2 { c_out, c3k, e, shortcut } => vec![json!(c_out), json!(c3k), json!(e), json!(shortcut)],
            Block::C2f { c_out, shortcut, e } => vec![json!(c_out), json!(shortcut), json!(e)],
            Block::Sppf { c_out, k } => vec![json!(c_out), json!(k)],
            Block::C2psa { c_out } => vec![json!(c_out)],
            Block::Upsample { scale } => vec![json!(scale)],
            Block::Concat { dim } => vec![json!(dim)],
            Block::Detect { nc, reg_max } => vec![json!(nc), json!(reg_max)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub index: usize,
    pub from: Vec<Source>,
    /// Nominal repeat count, before depth scaling.
    pub repeats: usize,
    pub block: Block,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleProfile {
    pub depth: f64,
    pub width: f64,
    pub max_channels: usize,
}

impl ScaleProfile {
    pub const NANO: ScaleProfile = ScaleProfile { depth: 0.5, width: 0.25, max_channels: 1024 };

    /// `min(c, max_channels)·width`, rounded up to a multiple of 8.
    pub fn channels(&self, c: usize) -> usize {
        let x = c.min(self.max_channels) as f64 * self.width;
        ((x / 8.0).ceil() as usize * 8).max(8)
    }

    pub fn repeats(&self, r: usize) -> usize {
        if r > 1 {
            ((r as f64 * self.depth).round() as usize).max(1)
        } else {
            r
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Ghosthead,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Baseline, Variant::Ghosthead];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Ghosthead => "ghosthead",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "ghosthead" => Ok(Variant::Ghosthead),
            other => Err(Error::config(format!("unknown variant `{other}` (expected baseline or ghosthead)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub scale: ScaleProfile,
    pub layers: Vec<LayerSpec>,
    /// Layers `0..backbone_len` form the backbone; the rest are the head.
    pub backbone_len: usize,
}

/// Line/column (1-based) of each layer entry, for error reporting.
struct Positions {
    scale: (usize, usize),
    backbone: Vec<(usize, usize)>,
    head: Vec<(usize, usize)>,
}

fn scan_positions(text: &str) -> Positions {
    let mut pos = Positions { scale: (1, 1), backbone: Vec::new(), head: Vec::new() };
    let (mut line, mut col) = (1usize, 0usize);
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    let mut current = String::new();
    let mut key = String::new();
    for ch in text.chars() {
        if ch == '\n' {
            line += 1;
            col = 0;
        } else {
            col += 1;
        }
        if in_str {
            if escaped {
                escaped = false;
                current.push(ch);
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_str = false;
                if depth == 1 {
                    key = std::mem::take(&mut current);
                }
            } else {
                current.push(ch);
            }
            continue;
        }
        match ch {
            '"' => {
                in_str = true;
                current.clear();
            }
            '[' | '{' => {
                depth += 1;
                if depth == 2 && key == "scale" {
                    pos.scale = (line, col);
                }
                if depth == 3 && ch == '[' {
                    match key.as_str() {
                        "backbone" => pos.backbone.push((line, col)),
                        "head" => pos.head.push((line, col)),
                        _ => {}
                    }
                }
            }
            ']' | '}' => depth = depth.saturating_sub(1),
            _ => {}
        }
    }
    pos
}

fn perr(kind: ParseErrorKind, at: (usize, usize), message: impl Into<String>) -> Error {
    Error::Parse { kind, line: at.0, column: at.1, message: message.into() }
}

struct Args<'a> {
    vals: &'a [Value],
    at: (usize, usize),
    block: &'a str,
}

impl Args<'_> {
    fn bad(&self, msg: impl fmt::Display) -> Error {
        perr(ParseErrorKind::BadArguments, self.at, format!("{}: {msg}", self.block))
    }

    fn max_len(&self, n: usize) -> Result<()> {
        if self.vals.len() > n {
            return Err(self.bad(format!("expected at most {n} arguments, got {}", self.vals.len())));
        }
        Ok(())
    }

    fn usize(&self, i: usize, default: Option<usize>) -> Result<usize> {
        match self.vals.get(i) {
            None => default.ok_or_else(|| self.bad(format!("missing argument {}", i + 1))),
            Some(v) => match v.as_u64() {
                Some(x) if x > 0 => Ok(x as usize),
                _ => Err(self.bad(format!("argument {} must be a positive integer, got {v}", i + 1))),
            },
        }
    }

    fn bool(&self, i: usize, default: bool) -> Result<bool> {
        match self.vals.get(i) {
            None => Ok(default),
            Some(v) => v.as_bool().ok_or_else(|| self.bad(format!("argument {} must be a boolean, got {v}", i + 1))),
        }
    }

    fn ratio(&self, i: usize, default: f64) -> Result<f64> {
        match self.vals.get(i) {
            None => Ok(default),
            Some(v) => match v.as_f64() {
                Some(x) if x > 0.0 && x <= 1.0 => Ok(x),
                _ => Err(self.bad(format!("argument {} must be a ratio in (0, 1], got {v}", i + 1))),
            },
        }
    }
}

fn parse_block(name: &str, vals: &[Value], at: (usize, usize)) -> Result<Block> {
    let a = Args { vals, at, block: name };
    let block = match name {
        "Conv" | "GhostConv" => {
            a.max_len(3)?;
            let (c_out, k, s) = (a.usize(0, None)?, a.usize(1, Some(1))?, a.usize(2, Some(1))?);
            if k % 2 == 0 {
                return Err(a.bad(format!("kernel must be odd, got {k}")));
            }
            if name == "Conv" {
                Block::Conv { c_out, k, s }
            } else {
                Block::GhostConv { c_out, k, s }
            }
        }
        "C3k2" => {
            a.max_len(4)?;
            Block::C3k2 {
                c_out: a.usize(0, None)?,
                c3k: a.bool(1, false)?,
                e: a.ratio(2, 0.5)?,
                shortcut: a.bool(3, true)?,
            }
        }
        "C2f" => {
            a.max_len(3)?;
            Block::C2f { c_out: a.usize(0, None)?, shortcut: a.bool(1, false)?, e: a.ratio(2, 0.5)? }
        }
        "SPPF" => {
            a.max_len(2)?;
            let k = a.usize(1, Some(5))?;
            if k % 2 == 0 {
                return Err(a.bad(format!("pool kernel must be odd, got {k}")));
            }
            Block::Sppf { c_out: a.usize(0, None)?, k }
        }
        "C2PSA" => {
            a.max_len(1)?;
            Block::C2psa { c_out: a.usize(0, None)? }
        }
        "Upsample" => {
            a.max_len(1)?;
            let scale = a.usize(0, Some(2))?;
            if scale != 2 {
                return Err(a.bad(format!("only scale 2 is supported, got {scale}")));
            }
            Block::Upsample { scale }
        }
        "Concat" => {
            a.max_len(1)?;
            let dim = a.usize(0, Some(1))?;
            if dim != 1 {
                return Err(a.bad(format!("only channel concat (dim 1) is supported, got {dim}")));
            }
            Block::Concat { dim }
        }
        "Detect" => {
            a.max_len(2)?;
            let reg_max = a.usize(1, Some(16))?;
            if reg_max < 2 {
                return Err(a.bad("reg_max must be at least 2"));
            }
            Block::Detect { nc: a.usize(0, None)?, reg_max }
        }
        other => {
            return Err(perr(
                ParseErrorKind::UnknownBlock,
                at,
                format!("unknown block `{other}` (expected one of {})", Block::NAMES.join(", ")),
            ))
        }
    };
    Ok(block)
}

fn parse_layer(index: usize, entry: &Value, at: (usize, usize)) -> Result<LayerSpec> {
    let syntax = |msg: String| perr(ParseErrorKind::Syntax, at, msg);
    let items = entry.as_array().ok_or_else(|| syntax(format!("layer {index} must be an array")))?;
    if items.len() < 3 {
        return Err(syntax(format!("layer {index} needs [from, repeats, block, args...]")));
    }
    let raw_from: Vec<&Value> = match &items[0] {
        Value::Array(v) => v.iter().collect(),
        v => vec![v],
    };
    if raw_from.is_empty() {
        return Err(syntax(format!("layer {index} has an empty from-list")));
    }
    let mut from = Vec::with_capacity(raw_from.len());
    for v in raw_from {
        let f = v.as_i64().ok_or_else(|| syntax(format!("layer {index}: from-index {v} is not an integer")))?;
        let src = if f < 0 {
            let j = index as i64 + f;
            if j == -1 && index == 0 {
                Source::Input
            } else if j < 0 {
                return Err(perr(
                    ParseErrorKind::DanglingReference,
                    at,
                    format!("layer {index} references {f}, before the first layer"),
                ));
            } else {
                Source::Layer(j as usize)
            }
        } else if (f as usize) < index {
            Source::Layer(f as usize)
        } else {
            return Err(perr(
                ParseErrorKind::DanglingReference,
                at,
                format!("layer {index} references layer {f}, which does not precede it"),
            ));
        };
        from.push(src);
    }
    let repeats = match items[1].as_u64() {
        Some(r) if r > 0 => r as usize,
        _ => return Err(syntax(format!("layer {index}: repeats must be a positive integer, got {}", items[1]))),
    };
    let name = items[2].as_str().ok_or_else(|| syntax(format!("layer {index}: block name must be a string")))?;
    let block = parse_block(name, &items[3..], at)?;
    let inputs_ok = match block {
        Block::Concat { .. } => from.len() >= 2,
        Block::Detect { .. } => from.len() == 3,
        _ => from.len() == 1,
    };
    if !inputs_ok {
        return Err(perr(
            ParseErrorKind::BadArguments,
            at,
            format!("layer {index}: {name} cannot take {} inputs", from.len()),
        ));
    }
    if repeats > 1 && !matches!(block, Block::C3k2 { .. } | Block::C2f { .. } | Block::C2psa { .. }) {
        return Err(perr(ParseErrorKind::BadArguments, at, format!("layer {index}: {name} cannot repeat")));
    }
    Ok(LayerSpec { index, from, repeats, block })
}

impl ModelConfig {
    pub fn yolo11n() -> Self {
        Self::parse(YOLO11N_CONFIG).expect("shipped config is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            kind: ParseErrorKind::Syntax,
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let pos = scan_positions(text);
        let obj = root.as_object().ok_or_else(|| perr(ParseErrorKind::Syntax, (1, 1), "config must be an object"))?;
        let section = |k: &str| -> Result<&Vec<Value>> {
            obj.get(k)
                .and_then(Value::as_array)
                .ok_or_else(|| perr(ParseErrorKind::Syntax, (1, 1), format!("missing `{k}` array")))
        };
        let scale_obj = obj
            .get("scale")
            .and_then(Value::as_object)
            .ok_or_else(|| perr(ParseErrorKind::Syntax, (1, 1), "missing `scale` object"))?;
        let mult = |k: &str| -> Result<f64> {
            match scale_obj.get(k).and_then(Value::as_f64) {
                Some(x) if x > 0.0 && x <= 1.0 => Ok(x),
                _ => Err(perr(ParseErrorKind::BadArguments, pos.scale, format!("scale.{k} must be in (0, 1]"))),
            }
        };
        let max_channels = match scale_obj.get("max_channels").and_then(Value::as_u64) {
            Some(m) if m > 0 => m as usize,
            _ => return Err(perr(ParseErrorKind::BadArguments, pos.scale, "scale.max_channels must be positive")),
        };
        let scale = ScaleProfile { depth: mult("depth")?, width: mult("width")?, max_channels };

        let backbone = section("backbone")?;
        let head = section("head")?;
        let at = |i: usize| -> (usize, usize) {
            if i < backbone.len() {
                pos.backbone.get(i).copied().unwrap_or((1, 1))
            } else {
                pos.head.get(i - backbone.len()).copied().unwrap_or((1, 1))
            }
        };
        let mut layers = Vec::with_capacity(backbone.len() + head.len());
        let mut detect_seen = false;
        for (i, entry) in backbone.iter().chain(head).enumerate() {
            let spec = parse_layer(i, entry, at(i))?;
            if let Block::Detect { .. } = spec.block {
                if detect_seen {
                    return Err(perr(ParseErrorKind::DuplicateDetect, at(i), format!("layer {i} is a second Detect")));
                }
                detect_seen = true;
            }
            layers.push(spec);
        }
        let last = layers.len().saturating_sub(1);
        if !detect_seen {
            return Err(perr(ParseErrorKind::MissingDetect, at(last), "config has no Detect layer"));
        }
        if !matches!(layers[last].block, Block::Detect { .. }) {
            return Err(perr(ParseErrorKind::BadArguments, at(last), "Detect must be the final layer"));
        }
        Ok(ModelConfig { scale, layers, backbone_len: backbone.len() })
    }

    pub fn is_head(&self, index: usize) -> bool {
        index >= self.backbone_len
    }

    /// Serializes with absolute from-indices and every argument spelled out,
    /// one layer per line.
    pub fn to_json(&self) -> String {
        let layer = |l: &LayerSpec| -> String {
            let from: Vec<Value> = l
                .from
                .iter()
                .map(|s| match s {
                    Source::Input => json!(-1),
                    Source::Layer(j) => json!(j),
                })
                .collect();
            let from = if from.len() == 1 { from[0].clone() } else { Value::Array(from) };
            let mut entry = vec![from, json!(l.repeats), json!(l.block.name())];
            entry.extend(l.block.args_json());
            Value::Array(entry).to_string()
        };
        let section = |ls: &[LayerSpec]| ls.iter().map(|l| format!("    {}", layer(l))).collect::<Vec<_>>().join(",\n");
        format!(
            "{{\n  \"scale\": {},\n  \"backbone\": [\n{}\n  ],\n  \"head\": [\n{}\n  ]\n}}\n",
            json!({"depth": self.scale.depth, "width": self.scale.width, "max_channels": self.scale.max_channels}),
            section(&self.layers[..self.backbone_len]),
            section(&self.layers[self.backbone_len..]),
        )
    }

    /// Applies the variant transform: for `Ghosthead`, head Conv layers
    /// become GhostConv and head C3k2 layers become C2f.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut out = self.clone();
        if variant == Variant::Baseline {
            return out;
        }
        for l in out.layers.iter_mut().skip(self.backbone_len) {
            l.block = match l.block {
                Block::Conv { c_out, k, s } => Block::GhostConv { c_out, k, s },
                Block::C3k2 { c_out, e, shortcut, .. } => Block::C2f { c_out, shortcut, e },
                ref b => b.clone(),
            };
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_rules() {
        let p = ScaleProfile::NANO;
        assert_eq!(p.channels(256), 64);
        assert_eq!(p.channels(1024), 256);
        assert_eq!(p.channels(2048), 256);
        assert_eq!(p.channels(100), 32);
        assert_eq!(p.repeats(2), 1);
        assert_eq!(p.repeats(1), 1);
        assert_eq!(p.repeats(6), 3);
    }

    #[test]
    fn variant_names() {
        assert_eq!("ghosthead".parse::<Variant>().unwrap(), Variant::Ghosthead);
        assert!(matches!("bogus".parse::<Variant>(), Err(Error::Config(_))));
    }

    #[test]
    fn positions_point_at_layer_lines() {
        let pos = scan_positions(YOLO11N_CONFIG);
        assert_eq!(pos.backbone.len(), 11);
        assert_eq!(pos.head.len(), 13);
        assert_eq!(pos.backbone[0], (4, 5));
        assert_eq!(pos.scale, (2, 12));
    }
}
