//! Microbenchmarks of the shift primitives against their data-moving
//! baselines. Times are reported only; copy counts are measured.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::GradTape;
use crate::conv::{self, FusedEnhancedSpec, GroupConvParams};
use crate::error::{Error, Result};
use crate::shift::{self, ChannelShiftSpec, ShiftDirection};
use crate::tensor::{Dims, TensorView};

pub const MIN_REPS: usize = 30;
const WARMUP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchOp {
    ChannelShift,
    ChannelShuffle,
    AddressShift,
    FeatureMapShift,
    ArenaConcat,
    ExplicitConcat,
    FusedEnhancedGconv,
    ComposedPipeline,
}

impl BenchOp {
    pub const ALL: [BenchOp; 8] = [
        BenchOp::ChannelShift,
        BenchOp::ChannelShuffle,
        BenchOp::AddressShift,
        BenchOp::FeatureMapShift,
        BenchOp::ArenaConcat,
        BenchOp::ExplicitConcat,
        BenchOp::FusedEnhancedGconv,
        BenchOp::ComposedPipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchOp::ChannelShift => "channel_shift",
            BenchOp::ChannelShuffle => "channel_shuffle",
            BenchOp::AddressShift => "address_shift",
            BenchOp::FeatureMapShift => "feature_map_shift",
            BenchOp::ArenaConcat => "arena_concat",
            BenchOp::ExplicitConcat => "explicit_concat",
            BenchOp::FusedEnhancedGconv => "fused_enhanced_gconv",
            BenchOp::ComposedPipeline => "composed_pipeline",
        }
    }

    /// Elements written by one run, from the primitives' definitions.
    pub fn predicted_copied(self, d: Dims, groups: usize) -> u64 {
        let shift = (d.c / groups.max(1) / 2 * d.n * d.plane()) as u64;
        let all = d.numel() as u64;
        match self {
            BenchOp::ChannelShift => shift,
            BenchOp::AddressShift | BenchOp::ArenaConcat => 0,
            BenchOp::ChannelShuffle | BenchOp::FeatureMapShift | BenchOp::ExplicitConcat => all,
            BenchOp::FusedEnhancedGconv => shift + all,
            BenchOp::ComposedPipeline => shift + 2 * all,
        }
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown bench op '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub op: BenchOp,
    pub dims: Dims,
    pub groups: usize,
    pub reps: usize,
    pub seed: u64,
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub op: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub reps: usize,
    pub median_ns: f64,
    pub mean_ns: f64,
    pub stddev_ns: f64,
    pub copied: u64,
    pub transformed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub throughput: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parallel: Option<bool>,
}

impl BenchResult {
    /// CSV with the fixed schema (throughput and the threading flag are
    /// JSON-only).
    pub fn to_csv(results: &[BenchResult]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in results {
            w.serialize(BenchResult {
                throughput: None,
                parallel: None,
                ..r.clone()
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

fn random_fill(t: &TensorView<f32>, rng: &mut ChaCha8Rng) -> Result<()> {
    let v: Vec<f32> = (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    t.write_dense(&v)
}

fn time(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..WARMUP {
        f()?;
    }
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            f()?;
            Ok(start.elapsed().as_nanos() as f64)
        })
        .collect()
}

fn check(op: BenchOp, d: Dims, groups: usize) -> Result<()> {
    let divisible = |by: usize| {
        if by == 0 || !d.c.is_multiple_of(by) {
            Err(Error::InvalidArgument(format!(
                "{op} needs C = {} divisible by {by}",
                d.c
            )))
        } else {
            Ok(())
        }
    };
    match op {
        BenchOp::ChannelShift | BenchOp::ChannelShuffle => divisible(groups),
        BenchOp::ArenaConcat | BenchOp::ExplicitConcat => divisible(2),
        BenchOp::FusedEnhancedGconv | BenchOp::ComposedPipeline => {
            if groups != FusedEnhancedSpec::GROUPS {
                return Err(Error::InvalidArgument(format!("{op} needs G = 4, got {groups}")));
            }
            divisible(4)
        }
        BenchOp::AddressShift | BenchOp::FeatureMapShift => Ok(()),
    }
}

/// Times `cfg.op` on seeded random data after a warm-up and measures the
/// elements it writes per run.
pub fn bench_op(cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.reps < MIN_REPS {
        return Err(Error::InvalidArgument(format!(
            "reps must be >= {MIN_REPS}, got {}",
            cfg.reps
        )));
    }
    let (op, d, g) = (cfg.op, cfg.dims, cfg.groups);
    check(op, d, g)?;
    let previous = conv::parallel_kernels();
    conv::set_parallel_kernels(cfg.parallel);
    let outcome = run(op, d, g, cfg.reps, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    conv::set_parallel_kernels(previous);
    let (times, copied) = outcome?;

    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        (sorted[k / 2 - 1] + sorted[k / 2]) / 2.0
    };
    let mean = times.iter().sum::<f64>() / k as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / k as f64;
    let transformed = d.numel() as u64;
    Ok(BenchResult {
        op: op.name().to_string(),
        n: d.n,
        c: d.c,
        h: d.h,
        w: d.w,
        g,
        reps: cfg.reps,
        median_ns: median,
        mean_ns: mean,
        stddev_ns: var.sqrt(),
        copied,
        transformed,
        throughput: Some(if median > 0.0 {
            transformed as f64 / (median * 1e-9)
        } else {
            f64::INFINITY
        }),
        parallel: Some(cfg.parallel),
    })
}

fn run(op: BenchOp, d: Dims, g: usize, reps: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, u64)> {
    let logged = |tape: &GradTape<f32>| tape.move_log().iter().map(|m| m.copied).sum::<u64>();
    match op {
        BenchOp::ChannelShift => {
            let spec = ChannelShiftSpec::new(d.c, g)?;
            let x = TensorView::<f32>::alloc_with_reserve(d, 1, spec.shift_channels)?;
            random_fill(&x, rng)?;
            let mut tape = GradTape::inference().with_move_log();
            tape.channel_shift("channel_shift", &x, spec)?;
            let times = time(reps, || shift::channel_shift(&x, spec).map(|v| drop(black_box(v))))?;
            Ok((times, logged(&tape)))
        }
        BenchOp::ChannelShuffle => {
            let x = TensorView::<f32>::alloc(d, 1)?;
            random_fill(&x, rng)?;
            let mut tape = GradTape::inference().with_move_log();
            tape.channel_shuffle("channel_shuffle", &x, g)?;
            let times = time(reps, || {
                shift::channel_shuffle_reference(&x, g).map(|v| drop(black_box(v)))
            })?;
            Ok((times, logged(&tape)))
        }
        BenchOp::AddressShift | BenchOp::FeatureMapShift => {
            let x = TensorView::<f32>::alloc(d, 1)?;
            random_fill(&x, rng)?;
            let dir = ShiftDirection::Right;
            let mut tape = GradTape::inference().with_move_log();
            if op == BenchOp::AddressShift {
                tape.address_shift("address_shift", &x, dir)?;
                let times = time(reps, || shift::address_shift(&x, dir).map(|v| drop(black_box(v))))?;
                Ok((times, logged(&tape)))
            } else {
                tape.feature_map_shift("feature_map_shift", &x, dir)?;
                let times = time(reps, || {
                    shift::feature_map_shift_reference(&x, dir).map(|v| drop(black_box(v)))
                })?;
                Ok((times, logged(&tape)))
            }
        }
        BenchOp::ArenaConcat => {
            let half = d.c / 2;
            let arena = shift::arena_plan::<f32>(d.n, d.h, d.w, &[half, d.c - half])?;
            random_fill(&arena.slot(0)?, rng)?;
            random_fill(&arena.slot(1)?, rng)?;
            let mut tape = GradTape::inference().with_move_log();
            tape.arena_concat("arena_concat", &arena);
            let times = time(reps, || {
                black_box(shift::arena_concat(&arena));
                Ok(())
            })?;
            Ok((times, logged(&tape)))
        }
        BenchOp::ExplicitConcat => {
            let half = d.c / 2;
            let a = TensorView::<f32>::alloc(d.with_channels(half), 1)?;
            let b = TensorView::<f32>::alloc(d.with_channels(d.c - half), 1)?;
            random_fill(&a, rng)?;
            random_fill(&b, rng)?;
            let copied = shift::concat_reference(&[a.clone(), b.clone()])?.buffer().moves();
            let times = time(reps, || {
                shift::concat_reference(&[a.clone(), b.clone()]).map(|v| drop(black_box(v)))
            })?;
            Ok((times, copied))
        }
        BenchOp::FusedEnhancedGconv | BenchOp::ComposedPipeline => {
            let f = FusedEnhancedSpec::for_channels(d.c)?;
            let x = TensorView::<f32>::alloc_with_reserve(d, 1, f.shift_channels)?;
            random_fill(&x, rng)?;
            let p = GroupConvParams::<f32>::msra(d.c, d.c, g, 1, 1, rng)?;
            let mut tape = GradTape::inference().with_move_log();
            let times = if op == BenchOp::FusedEnhancedGconv {
                tape.fused_enhanced("fused_enhanced_gconv", &x, &p, &f, None)?;
                time(reps, || {
                    conv::fused_enhanced_gconv(&x, &p, &f).map(|v| drop(black_box(v)))
                })?
            } else {
                tape.composed_enhanced("composed_pipeline", &x, &p, &f, None)?;
                time(reps, || {
                    conv::composed_enhanced_reference(&x, &p, &f).map(|v| drop(black_box(v)))
                })?
            };
            Ok((times, logged(&tape)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(op: BenchOp, c: usize, g: usize) -> BenchConfig {
        BenchConfig {
            op,
            dims: Dims::new(1, c, 4, 4).unwrap(),
            groups: g,
            reps: MIN_REPS,
            seed: 3,
            parallel: false,
        }
    }

    #[test]
    fn copies_match_prediction() {
        for op in BenchOp::ALL {
            let c = cfg(op, 16, 4);
            let r = bench_op(&c).unwrap();
            assert_eq!(r.copied, op.predicted_copied(c.dims, 4), "{op}");
        }
    }

    #[test]
    fn too_few_reps() {
        let mut c = cfg(BenchOp::AddressShift, 4, 1);
        c.reps = 5;
        assert!(bench_op(&c).is_err());
    }

    #[test]
    fn parse_names() {
        for op in BenchOp::ALL {
            assert_eq!(op.name().parse::<BenchOp>().unwrap(), op);
        }
        assert!("shuffle".parse::<BenchOp>().is_err());
    }
}
