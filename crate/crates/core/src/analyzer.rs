//! Parameter, FLOP and data-movement accounting.
//!
//! FLOPs are multiply-accumulates. Parameters are convolution weights plus
//! the classifier's weights and biases (batch norm is assumed folded).
//! `copied` counts elements written, `transformed` the elements of the
//! operation's logical output.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::autodiff::GradTape;
use crate::error::{Error, Result};
use crate::network::{BnMode, ModuleVariant, Network, NetworkSpec, Shortcut};
use crate::tensor::{Element, TensorView};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv,
    Shift,
    Shuffle,
    Concat,
    Copy,
    Norm,
    Activation,
    Pool,
    Add,
    Fc,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::Shift => "shift",
            OpKind::Shuffle => "shuffle",
            OpKind::Concat => "concat",
            OpKind::Copy => "copy",
            OpKind::Norm => "norm",
            OpKind::Activation => "activation",
            OpKind::Pool => "pool",
            OpKind::Add => "add",
            OpKind::Fc => "fc",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Data movement of one executed (or predicted) operation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveReport {
    pub op: String,
    pub kind: OpKind,
    pub transformed: u64,
    pub copied: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    #[serde(rename = "type")]
    pub kind: OpKind,
    pub params: u64,
    pub flops: u64,
    pub copied: u64,
    pub transformed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub flops: u64,
    pub copied: u64,
    pub transformed: u64,
}

impl Totals {
    fn add(&mut self, l: &LayerCost) {
        self.params += l.params;
        self.flops += l.flops;
        self.copied += l.copied;
        self.transformed += l.transformed;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub network: String,
    pub input: [usize; 4],
    pub layers: Vec<LayerCost>,
    pub totals: Totals,
    pub by_kind: BTreeMap<OpKind, Totals>,
}

impl CostReport {
    fn new(spec: &NetworkSpec, batch: usize, layers: Vec<LayerCost>) -> Self {
        let mut totals = Totals::default();
        let mut by_kind: BTreeMap<OpKind, Totals> = BTreeMap::new();
        for l in &layers {
            totals.add(l);
            by_kind.entry(l.kind).or_default().add(l);
        }
        Self {
            network: spec.name.clone(),
            input: [batch, spec.input.c, spec.input.h, spec.input.w],
            layers,
            totals,
            by_kind,
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for l in &self.layers {
            w.serialize(l)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let width = self.layers.iter().map(|l| l.layer.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} ({})",
            self.network,
            self.input.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        );
        let _ = writeln!(
            s,
            "{:<width$}  {:<10}  {:>10}  {:>13}  {:>12}  {:>12}",
            "layer", "type", "params", "flops", "copied", "transformed"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<width$}  {:<10}  {:>10}  {:>13}  {:>12}  {:>12}",
                l.layer, l.kind, l.params, l.flops, l.copied, l.transformed
            );
        }
        let _ = writeln!(s);
        for (kind, t) in &self.by_kind {
            let _ = writeln!(
                s,
                "{:<width$}  {:<10}  {:>10}  {:>13}  {:>12}  {:>12}",
                "", kind, t.params, t.flops, t.copied, t.transformed
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "{:<width$}  {:<10}  {:>10}  {:>13}  {:>12}  {:>12}",
            "total", "", t.params, t.flops, t.copied, t.transformed
        );
        s
    }

    pub fn moves(&self) -> Vec<MoveReport> {
        self.layers
            .iter()
            .map(|l| MoveReport {
                op: l.layer.clone(),
                kind: l.kind,
                transformed: l.transformed,
                copied: l.copied,
            })
            .collect()
    }
}

struct Plan {
    batch: u64,
    layers: Vec<LayerCost>,
}

impl Plan {
    fn push(&mut self, layer: String, kind: OpKind, params: usize, flops: usize, copied: usize, transformed: usize) {
        let b = self.batch;
        self.layers.push(LayerCost {
            layer,
            kind,
            params: params as u64,
            flops: flops as u64,
            copied: copied as u64 * b,
            transformed: transformed as u64 * b,
        });
    }

    /// A convolution output and, when present, its batch norm.
    fn conv(&mut self, name: &str, params: usize, out: usize, bn: bool) {
        self.push(format!("{name}.conv"), OpKind::Conv, params, 0, out, out);
        if bn {
            self.push(format!("{name}.bn"), OpKind::Norm, 0, 0, out, out);
        }
    }
}

/// Per-layer costs of `spec` for a batch of `batch` images, in the order the
/// forward pass executes them. Parameter and FLOP columns are per network
/// (per image); `copied` and `transformed` scale with the batch.
pub fn plan_costs(spec: &NetworkSpec, batch: usize, bn: bool, fusion: bool) -> Result<CostReport> {
    spec.validate()?;
    let mut p = Plan {
        batch: batch as u64,
        layers: Vec::new(),
    };
    let (h0, w0) = spec.stem_out();
    let hw0 = h0 * w0;
    let c0 = spec.stem.c_out;
    let stem_params = spec.input.c * c0 * 9;
    p.conv("stem", stem_params, c0 * hw0, bn);
    p.layers[0].flops = (stem_params * hw0) as u64;
    p.push("stem.relu".into(), OpKind::Activation, 0, 0, c0 * hw0, c0 * hw0);

    for (i, ((s, m, cfg), shape)) in spec.modules().zip(spec.module_shapes()).enumerate() {
        let n = format!("stage{}.module{}", s + 1, m + 1);
        let (hw, ohw) = (shape.h_in * shape.w_in, shape.h_out * shape.w_out);
        let (g, mid, b, sh) = (cfg.groups(), cfg.intermediate(), cfg.branch_out(), cfg.shift_channels());
        let p1 = cfg.c_in * mid / g;
        let first = p.layers.len();
        p.conv(&format!("{n}.gconv1"), p1, mid * hw, bn);
        p.layers[first].flops = (p1 * hw) as u64;
        p.push(format!("{n}.relu"), OpKind::Activation, 0, 0, mid * hw, mid * hw);

        let p2 = mid * b / g;
        let gname = format!("{n}.gconv2.conv");
        match (cfg.variant, fusion) {
            (ModuleVariant::AddressBased, _) => {
                p.push(format!("{n}.channel_shift"), OpKind::Shift, 0, 0, sh * hw, mid * hw);
                p.push(format!("{n}.address_shift"), OpKind::Shift, 0, 0, 0, mid * hw);
                p.push(gname, OpKind::Conv, p2, p2 * ohw, b * ohw, b * ohw);
            }
            (ModuleVariant::AddressEnhanced, true) => {
                p.push(gname, OpKind::Conv, p2, p2 * ohw, sh * hw + b * ohw, b * ohw);
            }
            (ModuleVariant::AddressEnhanced, false) => {
                p.push(format!("{gname}.channel_shift"), OpKind::Shift, 0, 0, sh * hw, mid * hw);
                p.push(format!("{gname}.address_shift"), OpKind::Shift, 0, 0, 0, mid * hw);
                p.push(format!("{gname}.materialize"), OpKind::Copy, 0, 0, mid * hw, mid * hw);
                p.push(gname, OpKind::Conv, p2, p2 * ohw, b * ohw, b * ohw);
            }
        }
        if bn {
            p.push(format!("{n}.gconv2.bn"), OpKind::Norm, 0, 0, b * ohw, b * ohw);
        }

        let out = cfg.c_out * ohw;
        match cfg.shortcut() {
            Shortcut::Add => p.push(format!("{n}.add"), OpKind::Add, 0, 0, out, out),
            Shortcut::Concat => {
                // only the stem writes straight into the first module's arena
                if i > 0 {
                    p.push(
                        format!("{n}.shortcut_copy"),
                        OpKind::Copy,
                        0,
                        0,
                        cfg.c_in * hw,
                        cfg.c_in * hw,
                    );
                }
                p.push(format!("{n}.concat"), OpKind::Concat, 0, 0, 0, out);
            }
            Shortcut::PooledConcat => {
                p.push(
                    format!("{n}.shortcut_pool"),
                    OpKind::Pool,
                    0,
                    0,
                    cfg.c_in * ohw,
                    cfg.c_in * ohw,
                );
                p.push(format!("{n}.concat"), OpKind::Concat, 0, 0, 0, out);
            }
        }
    }

    let (c, k) = (spec.final_channels(), spec.classes);
    p.push("head.gap".into(), OpKind::Pool, 0, 0, c, c);
    p.push("head.fc".into(), OpKind::Fc, c * k + k, c * k, k, k);
    Ok(CostReport::new(spec, batch, p.layers))
}

/// Inference costs of one image with batch norm folded and fusion on.
pub fn count_costs(spec: &NetworkSpec) -> Result<CostReport> {
    plan_costs(spec, 1, false, true)
}

/// Predicted [`MoveReport`]s for a forward pass of `batch` images.
pub fn predict_moves(spec: &NetworkSpec, batch: usize, bn: bool, fusion: bool) -> Result<Vec<MoveReport>> {
    Ok(plan_costs(spec, batch, bn, fusion)?.moves())
}

#[derive(Clone, Debug, Serialize)]
pub struct MovementAudit {
    pub measured: Vec<MoveReport>,
    pub predicted: Vec<MoveReport>,
}

impl MovementAudit {
    /// Human-readable differences; empty when the audit passes.
    pub fn mismatches(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.measured.len() != self.predicted.len() {
            out.push(format!(
                "{} measured ops vs {} predicted",
                self.measured.len(),
                self.predicted.len()
            ));
        }
        for (m, p) in self.measured.iter().zip(&self.predicted) {
            if m != p {
                out.push(format!("measured {m:?} predicted {p:?}"));
            }
        }
        out
    }

    pub fn matches(&self) -> bool {
        self.mismatches().is_empty()
    }

    pub fn measured_copied(&self) -> u64 {
        self.measured.iter().map(|m| m.copied).sum()
    }
}

/// Runs `net` on `input` with move logging and pairs the log with the
/// analyzer's prediction.
pub fn movement_audit<T: Element>(net: &Network<T>, input: &TensorView<T>, mode: BnMode) -> Result<MovementAudit> {
    let d = input.dims();
    let mut tape = GradTape::inference().with_move_log();
    net.forward(input, &mut tape, mode)?;
    let spec = net.spec().clone().with_input(d.h, d.w);
    Ok(MovementAudit {
        measured: tape.take_move_log(),
        predicted: predict_moves(&spec, d.n, net.has_bn(), net.fusion())?,
    })
}
