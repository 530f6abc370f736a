//! Model assembly from a config: layer graph, forward pass, parameter and
//! FLOP accounting, weight files.

mod config;
mod weights;

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{C2psa, ConvBlock, CspBlock, Ctx, DetectHead, GhostConv, Sppf};
use crate::params::{ParamKind, ParamSpec, ParamStore};
use crate::tensor::{Dims, Scalar, Tensor};

pub use config::{Block, LayerSpec, ModelConfig, ScaleProfile, Source, Variant, YOLO11N_CONFIG};
pub use weights::{read_weights, write_weights, WeightEntry, WEIGHTS_MAGIC, WEIGHTS_VERSION};

/// Instantiated layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvBlock),
    Ghost(GhostConv),
    Csp(CspBlock),
    Sppf(Sppf),
    C2psa(C2psa),
    Upsample,
    Concat,
    Detect(DetectHead),
}

impl Layer {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        match self {
            Layer::Conv(b) => b.param_specs(),
            Layer::Ghost(b) => b.param_specs(),
            Layer::Csp(b) => b.param_specs(),
            Layer::Sppf(b) => b.param_specs(),
            Layer::C2psa(b) => b.param_specs(),
            Layer::Detect(b) => b.param_specs(),
            Layer::Upsample | Layer::Concat => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub spec: LayerSpec,
    pub layer: Layer,
    /// Repeats after depth scaling.
    pub repeats: usize,
    pub c_out: usize,
    /// Downsampling factor relative to the input image.
    pub stride: usize,
}

/// The layer graph of one variant, without parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub variant: Variant,
    pub nodes: Vec<Node>,
    last_use: Vec<usize>,
}

/// Raw detection maps at strides 8, 16 and 32, each with `4·reg_max + nc`
/// channels (box distribution logits first).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<T: Scalar = f32> {
    pub maps: [Tensor<T>; 3],
    pub strides: [usize; 3],
    pub nc: usize,
    pub reg_max: usize,
}

impl Network {
    /// Builds the variant of `config`; the variant transform is applied here.
    pub fn build(config: &ModelConfig, variant: Variant) -> Result<Self> {
        let config = config.with_variant(variant);
        let scale = config.scale;
        let mut nodes: Vec<Node> = Vec::with_capacity(config.layers.len());
        for spec in &config.layers {
            let i = spec.index;
            let prefix = format!("layers.{i}");
            let inputs: Vec<(usize, usize)> = spec
                .from
                .iter()
                .map(|s| match *s {
                    Source::Input => (3, 1),
                    Source::Layer(j) => (nodes[j].c_out, nodes[j].stride),
                })
                .collect();
            let (c_in, stride_in) = inputs[0];
            let repeats = scale.repeats(spec.repeats);
            let (layer, c_out, stride) = match spec.block {
                Block::Conv { c_out, k, s } => {
                    let c = scale.channels(c_out);
                    (Layer::Conv(ConvBlock::new(prefix, c_in, c, k, s)), c, stride_in * s)
                }
                Block::GhostConv { c_out, k, s } => {
                    let c = scale.channels(c_out);
                    (Layer::Ghost(GhostConv::new(&prefix, c_in, c, k, s)?), c, stride_in * s)
                }
                Block::C3k2 { c_out, c3k, e, shortcut } => {
                    let c = scale.channels(c_out);
                    (Layer::Csp(CspBlock::c3k2(&prefix, c_in, c, repeats, c3k, e, shortcut)?), c, stride_in)
                }
                Block::C2f { c_out, shortcut, e } => {
                    let c = scale.channels(c_out);
                    (Layer::Csp(CspBlock::c2f(&prefix, c_in, c, repeats, shortcut, e)?), c, stride_in)
                }
                Block::Sppf { c_out, k } => {
                    let c = scale.channels(c_out);
                    (Layer::Sppf(Sppf::new(&prefix, c_in, c, k)), c, stride_in)
                }
                Block::C2psa { c_out } => {
                    let c = scale.channels(c_out);
                    (Layer::C2psa(C2psa::new(&prefix, c_in, c, repeats)?), c, stride_in)
                }
                Block::Upsample { .. } => {
                    if stride_in < 2 {
                        return Err(Error::config(format!("layer {i}: cannot upsample above input resolution")));
                    }
                    (Layer::Upsample, c_in, stride_in / 2)
                }
                Block::Concat { .. } => {
                    if inputs.iter().any(|&(_, s)| s != stride_in) {
                        return Err(Error::config(format!("layer {i}: concat inputs at different strides")));
                    }
                    (Layer::Concat, inputs.iter().map(|&(c, _)| c).sum(), stride_in)
                }
                Block::Detect { nc, reg_max } => {
                    let strides: Vec<usize> = inputs.iter().map(|&(_, s)| s).collect();
                    if strides != DetectHead::STRIDES {
                        return Err(Error::config(format!(
                            "layer {i}: Detect inputs must be at strides 8/16/32, got {strides:?}"
                        )));
                    }
                    let chans = [inputs[0].0, inputs[1].0, inputs[2].0];
                    let head = DetectHead::new(&prefix, chans, nc, reg_max)?;
                    let c = head.out_channels();
                    (Layer::Detect(head), c, 8)
                }
            };
            nodes.push(Node { spec: spec.clone(), layer, repeats, c_out, stride });
        }
        let mut last_use: Vec<usize> = (0..nodes.len()).collect();
        for n in &nodes {
            for s in &n.spec.from {
                if let Source::Layer(j) = *s {
                    last_use[j] = last_use[j].max(n.spec.index);
                }
            }
        }
        Ok(Network { config, variant, nodes, last_use })
    }

    pub fn detect(&self) -> &DetectHead {
        match &self.nodes.last().expect("config has layers").layer {
            Layer::Detect(d) => d,
            _ => unreachable!("parser guarantees a final Detect"),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        self.nodes.iter().flat_map(|n| n.layer.param_specs()).collect()
    }

    /// Input spatial dims must be multiples of this.
    pub fn max_stride(&self) -> usize {
        self.nodes.iter().map(|n| n.stride).max().unwrap_or(1)
    }

    pub fn check_input(&self, d: Dims) -> Result<()> {
        let s = self.max_stride();
        if d.c != 3 || d.h == 0 || d.w == 0 || d.h % s != 0 || d.w % s != 0 {
            return Err(Error::shape(format!("input must be N×3×H×W with H, W multiples of {s}, got {d}")));
        }
        Ok(())
    }

    /// Runs every layer in order, dropping intermediates after their last use.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Result<[Var<T>; 3]> {
        self.check_input(x.dims())?;
        let tape = ctx.tape();
        let mut outs: Vec<Option<Var<T>>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<Var<T>> = node
                .spec
                .from
                .iter()
                .map(|s| match *s {
                    Source::Input => x.clone(),
                    Source::Layer(j) => outs[j].clone().expect("producers precede consumers"),
                })
                .collect();
            let y = match &node.layer {
                Layer::Conv(b) => b.forward(ctx, &ins[0])?,
                Layer::Ghost(b) => b.forward(ctx, &ins[0])?,
                Layer::Csp(b) => b.forward(ctx, &ins[0])?,
                Layer::Sppf(b) => b.forward(ctx, &ins[0])?,
                Layer::C2psa(b) => b.forward(ctx, &ins[0])?,
                Layer::Upsample => tape.upsample_nearest2x(&ins[0]),
                Layer::Concat => {
                    let refs: Vec<&Var<T>> = ins.iter().collect();
                    tape.concat(&refs, 1)?
                }
                Layer::Detect(d) => return d.forward(ctx, [&ins[0], &ins[1], &ins[2]]),
            };
            outs[i] = Some(y);
            for s in &node.spec.from {
                if let Source::Layer(j) = *s {
                    if self.last_use[j] == i {
                        outs[j] = None;
                    }
                }
            }
        }
        unreachable!("parser guarantees a final Detect")
    }

    /// Per-layer parameter and MAC accounting for an `h×w` input.
    pub fn ledger(&self, h: usize, w: usize) -> Result<FlopLedger> {
        self.check_input(Dims::new(1, 3, h, w))?;
        let hw = |stride: usize| (h / stride, w / stride);
        let mut rows = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let input_stride = match node.spec.from[0] {
                Source::Input => 1,
                Source::Layer(j) => self.nodes[j].stride,
            };
            let (ih, iw) = hw(input_stride);
            let macs = match &node.layer {
                Layer::Conv(b) => b.macs(ih, iw),
                Layer::Ghost(b) => b.macs(ih, iw),
                Layer::Csp(b) => b.macs(ih, iw),
                Layer::Sppf(b) => b.macs(ih, iw),
                Layer::C2psa(b) => b.macs(ih, iw),
                Layer::Detect(d) => d.macs([hw(8), hw(16), hw(32)]),
                Layer::Upsample | Layer::Concat => 0,
            };
            let params = node.layer.param_specs().iter().map(ParamSpec::numel).sum();
            let out = match node.layer {
                Layer::Detect(_) => vec![hw(8), hw(16), hw(32)],
                _ => vec![hw(node.stride)],
            };
            let replaced = self.variant == Variant::Ghosthead
                && self.config.is_head(node.spec.index)
                && matches!(node.spec.block, Block::GhostConv { .. } | Block::C2f { .. });
            rows.push(LedgerRow {
                index: node.spec.index,
                from: node.spec.from.clone(),
                block: node.spec.block.name(),
                repeats: node.repeats,
                c_out: node.c_out,
                out_hw: out,
                params,
                macs,
                replaced,
            });
        }
        Ok(FlopLedger { variant: self.variant, input: (h, w), rows })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerRow {
    pub index: usize,
    pub from: Vec<Source>,
    pub block: &'static str,
    pub repeats: usize,
    pub c_out: usize,
    /// One entry per output map.
    pub out_hw: Vec<(usize, usize)>,
    pub params: usize,
    pub macs: u64,
    /// Set for head layers swapped in by the ghosthead transform.
    pub replaced: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopLedger {
    pub variant: Variant,
    pub input: (usize, usize),
    pub rows: Vec<LedgerRow>,
}

impl FlopLedger {
    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// `2·MACs / 1e9`.
    pub fn gflops(&self) -> f64 {
        2.0 * self.total_macs() as f64 / 1e9
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,from,block,repeats,out,params,macs,replaced\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.index,
                fmt_from(&r.from).replace(',', ";"),
                r.block,
                r.repeats,
                fmt_out(r.c_out, &r.out_hw).replace(',', ";"),
                r.params,
                r.macs,
                r.replaced
            );
        }
        s
    }

    /// Human-readable table, one row per layer, with totals.
    pub fn summary(&self) -> String {
        let mut s = format!("model: {} at {}x{}\n", self.variant, self.input.0, self.input.1);
        let _ = writeln!(
            s,
            "{:>3} {:<14} {:<10} {:>3} {:<22} {:>10} {:>14}",
            "idx", "from", "block", "n", "output", "params", "MACs"
        );
        for r in &self.rows {
            let mark = if r.replaced { "*" } else { "" };
            let _ = writeln!(
                s,
                "{:>3} {:<14} {:<10} {:>3} {:<22} {:>10} {:>14}",
                r.index,
                fmt_from(&r.from),
                format!("{}{mark}", r.block),
                r.repeats,
                fmt_out(r.c_out, &r.out_hw),
                r.params,
                r.macs
            );
        }
        let _ = writeln!(
            s,
            "total: {} layers, {} params, {} MACs, {:.2} GFLOPs",
            self.rows.len(),
            self.total_params(),
            self.total_macs(),
            self.gflops()
        );
        if self.rows.iter().any(|r| r.replaced) {
            s.push_str("* replaced by the ghosthead transform\n");
        }
        s
    }
}

fn fmt_from(from: &[Source]) -> String {
    let parts: Vec<String> = from
        .iter()
        .map(|s| match s {
            Source::Input => "input".to_string(),
            Source::Layer(j) => j.to_string(),
        })
        .collect();
    parts.join(",")
}

fn fmt_out(c: usize, hw: &[(usize, usize)]) -> String {
    let parts: Vec<String> = hw.iter().map(|(h, w)| format!("{c}x{h}x{w}")).collect();
    parts.join(",")
}

/// A network with parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub net: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh initialization from `seed`.
    pub fn init(net: Network, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::from_specs(&net.param_specs(), &mut rng)?;
        Ok(Model { net, params })
    }

    /// Number of stored scalars, running statistics included; equals the
    /// total payload length of the weights file.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params.trainable_count()
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &Tensor<T>) -> Result<HeadOutputs<T>> {
        let tape = Tape::inference();
        let ctx = Ctx::inference(&tape, &self.params);
        let [a, b, c] = self.net.forward(&ctx, &tape.constant(x.clone()))?;
        let head = self.net.detect();
        Ok(HeadOutputs {
            maps: [a.value().clone(), b.value().clone(), c.value().clone()],
            strides: DetectHead::STRIDES,
            nc: head.nc,
            reg_max: head.reg_max,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { net: self.net.clone(), params: self.params.cast() }
    }
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    Ok(std::io::BufReader::new(std::fs::File::open(path).map_err(Error::at_path(path))?))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(Error::at_path(path))?))
}

impl Model<f32> {
    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = create(path.as_ref())?;
        write_weights(&self.params, f)
    }

    /// Builds `net` with values from weight entries; every path must match.
    pub fn from_entries(net: Network, entries: Vec<WeightEntry>) -> Result<Self> {
        let specs = net.param_specs();
        let known: std::collections::BTreeMap<&str, &ParamSpec> = specs.iter().map(|s| (s.path.as_str(), s)).collect();
        for e in &entries {
            if !known.contains_key(e.path.as_str()) {
                return Err(Error::UnknownPath(e.path.clone()));
            }
        }
        let mut by_path: std::collections::BTreeMap<String, WeightEntry> =
            entries.into_iter().map(|e| (e.path.clone(), e)).collect();
        let mut params = ParamStore::new();
        for spec in &specs {
            let e = by_path.remove(&spec.path).ok_or_else(|| Error::MissingPath(spec.path.clone()))?;
            if e.shape != spec.shape {
                return Err(Error::shape(format!(
                    "`{}`: file has {:?}, model expects {:?}",
                    spec.path, e.shape, spec.shape
                )));
            }
            let dims = crate::params::shape_dims(&e.shape)?;
            params.insert(spec.path.clone(), spec.shape.clone(), spec.kind, Tensor::new(dims, e.values)?)?;
        }
        Ok(Model { net, params })
    }

    pub fn load_weights(net: Network, path: impl AsRef<Path>) -> Result<Self> {
        let f = open(path.as_ref())?;
        Self::from_entries(net, read_weights(f)?)
    }

    /// Loads a weights file, choosing the variant whose parameter paths match.
    pub fn load_any_variant(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let f = open(path.as_ref())?;
        let entries = read_weights(f)?;
        let ghost_paths = entries.iter().any(|e| e.path.contains(".primary.") || e.path.contains(".cheap."));
        let variant = if ghost_paths { Variant::Ghosthead } else { Variant::Baseline };
        Self::from_entries(Network::build(config, variant)?, entries)
    }
}

impl<T: Scalar> Model<T> {
    /// Names of trainable parameters, in path order.
    pub fn trainable_paths(&self) -> Vec<String> {
        self.params.iter().filter(|(_, p)| p.kind == ParamKind::Trainable).map(|(k, _)| k.clone()).collect()
    }
}
