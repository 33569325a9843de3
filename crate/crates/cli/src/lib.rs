//! `addrshift` command line.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use addrshift_core::analyzer::plan_costs;
use addrshift_core::autodiff::{train_toy, GradTape, SgdConfig, TrainConfig};
use addrshift_core::bench::{bench_op, BenchConfig, BenchOp, BenchResult};
use addrshift_core::network::{build_network, BnMode, Network, NetworkSpec};
use addrshift_core::verify::{run_suite, Suite};
use addrshift_core::{io, Dims, TensorView};
use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser, Debug)]
#[command(
    name = "addrshift",
    version,
    about = "Zero-copy shift primitives and AddressNet tooling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run seeded property suites.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// Architecture and per-layer costs of a network.
    Describe {
        #[arg(long)]
        net: String,
        /// Input size as HxW.
        #[arg(long, value_parser = parse_hw)]
        input: Option<(usize, usize)>,
        #[arg(long, value_enum, default_value_t = TableFormat::Table)]
        format: TableFormat,
    },
    /// Time a primitive against its baseline.
    Bench {
        /// Operation name, or `all`.
        #[arg(long, default_value = "all")]
        op: String,
        #[arg(long, value_parser = parse_dims, default_value = "1,240,32,32")]
        dims: Dims,
        #[arg(long, default_value_t = 4)]
        groups: usize,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Multi-threaded convolution kernels.
        #[arg(long)]
        parallel: bool,
        #[arg(long, value_enum, default_value_t = BenchFormat::Csv)]
        format: BenchFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a network and print its logits.
    Forward {
        #[arg(long)]
        net: String,
        /// SHFT tensor file, or `random`.
        #[arg(long, default_value = "random")]
        input: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Images in a random batch.
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Fold batch norm into the convolutions.
        #[arg(long)]
        folded: bool,
        /// Materialize the enhanced shifts instead of fusing them.
        #[arg(long)]
        no_fusion: bool,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// Train on a synthetic toy dataset and emit the loss curve.
    TrainToy {
        #[arg(long, default_value = "addressnet-20")]
        net: String,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 5e-4)]
        weight_decay: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TableFormat {
    Table,
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchFormat {
    Csv,
    Json,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    match v[..] {
        [n, c, h, w] => Dims::new(n, c, h, w).map_err(|e| e.to_string()),
        _ => Err(format!("expected N,C,H,W, got '{s}'")),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code: 0 success, 1 failed check or runtime error, 2 usage error.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return if code == 0 { 0 } else { 2 };
        }
    };
    match execute(cli.command, out) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> anyhow::Result<bool> {
    match cmd {
        Command::Verify { suite, seed, format } => {
            let report = run_suite(suite, seed);
            match format {
                ReportFormat::Text => out.write_all(report.to_text().as_bytes())?,
                ReportFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
            }
            Ok(report.passed())
        }
        Command::Describe { net, input, format } => {
            let mut spec = build_network(&net)?;
            if let Some((h, w)) = input {
                spec = spec.with_input(h, w);
            }
            let costs = plan_costs(&spec, 1, false, true)?;
            match format {
                TableFormat::Table => {
                    out.write_all(architecture_table(&spec).as_bytes())?;
                    writeln!(out)?;
                    out.write_all(costs.to_table().as_bytes())?;
                }
                TableFormat::Csv => out.write_all(costs.to_csv()?.as_bytes())?,
                TableFormat::Json => {
                    let doc = serde_json::json!({ "spec": spec, "costs": costs });
                    writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
                }
            }
            Ok(true)
        }
        Command::Bench {
            op,
            dims,
            groups,
            reps,
            seed,
            parallel,
            format,
            out: path,
        } => {
            let ops: Vec<BenchOp> = if op == "all" {
                BenchOp::ALL.to_vec()
            } else {
                vec![op.parse()?]
            };
            let results = ops
                .into_iter()
                .map(|op| {
                    bench_op(&BenchConfig {
                        op,
                        dims,
                        groups,
                        reps,
                        seed,
                        parallel,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let text = match format {
                BenchFormat::Csv => BenchResult::to_csv(&results)?,
                BenchFormat::Json => serde_json::to_string_pretty(&results)? + "\n",
            };
            emit(out, path, &text)?;
            Ok(true)
        }
        Command::Forward {
            net,
            input,
            seed,
            batch,
            folded,
            no_fusion,
            format,
        } => {
            let spec = build_network(&net)?;
            let x = if input == "random" {
                random_input(&spec, batch, seed)?
            } else {
                io::read_tensor::<f32>(input.as_ref()).with_context(|| format!("reading {input}"))?
            };
            if x.dims().c != spec.input.c {
                bail!(
                    "input has {} channels, {} expects {}",
                    x.dims().c,
                    spec.name,
                    spec.input.c
                );
            }
            let mut model = Network::<f32>::new(&spec, seed)?;
            if folded {
                model = model.folded()?;
            }
            model.set_fusion(!no_fusion);
            let logits = model.forward(&x, &mut GradTape::inference(), BnMode::Infer)?;
            let values = logits.to_vec();
            match format {
                ReportFormat::Text => {
                    let mut s = String::new();
                    for (n, row) in values.chunks(spec.classes).enumerate() {
                        let row: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                        let _ = writeln!(s, "{n}: {}", row.join(" "));
                    }
                    out.write_all(s.as_bytes())?;
                }
                ReportFormat::Json => {
                    let doc = serde_json::json!({
                        "net": spec.name,
                        "dims": logits.dims().to_vec(),
                        "logits": values,
                    });
                    writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
                }
            }
            Ok(true)
        }
        Command::TrainToy {
            net,
            classes,
            steps,
            lr,
            momentum,
            weight_decay,
            batch_size,
            seed,
            out: path,
        } => {
            if lr.is_nan() || lr < 0.0 {
                bail!("--lr must be >= 0, got {lr}");
            }
            let cfg = TrainConfig {
                network: net,
                classes,
                steps,
                batch_size,
                sgd: SgdConfig {
                    lr,
                    momentum,
                    weight_decay,
                },
                seed,
                ..TrainConfig::default()
            };
            let curve = train_toy::<f32>(&cfg)?;
            let csv = curve.to_csv()?;
            let (first, last) = (curve.points.first(), curve.points.last());
            let summary = format!(
                "initial loss {:.4}, final loss {:.4}, final accuracy {:.4}\n",
                first.map_or(f64::NAN, |p| p.loss),
                last.map_or(f64::NAN, |p| p.loss),
                curve.final_accuracy
            );
            match path {
                Some(p) => {
                    fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?;
                    out.write_all(summary.as_bytes())?;
                }
                None => out.write_all(csv.as_bytes())?,
            }
            Ok(true)
        }
    }
}

fn emit(out: &mut dyn Write, path: Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn random_input(spec: &NetworkSpec, batch: usize, seed: u64) -> anyhow::Result<TensorView<f32>> {
    if batch == 0 {
        return Err(anyhow!("--batch must be >= 1"));
    }
    let d = Dims::new(batch, spec.input.c, spec.input.h, spec.input.w)?;
    let rng = &mut ChaCha8Rng::seed_from_u64(seed ^ 0x1f2e_3d4c);
    Ok(TensorView::from_fn(d, |_| rng.random_range(-1.0..1.0))?)
}

/// One row per run of identical modules: type, output size, stride,
/// expansion, repeat.
pub fn architecture_table(spec: &NetworkSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} input {}x{}x{}, {} classes",
        spec.name, spec.input.h, spec.input.w, spec.input.c, spec.classes
    );
    let _ = writeln!(
        s,
        "{:<8}  {:<18}  {:>14}  {:>6}  {:>3}  {:>6}",
        "stage", "type", "output", "stride", "e", "repeat"
    );
    let (h, w) = spec.stem_out();
    let _ = writeln!(
        s,
        "{:<8}  {:<18}  {:>14}  {:>6}  {:>3}  {:>6}",
        "stem",
        "conv3x3",
        format!("{h}x{w}x{}", spec.stem.c_out),
        spec.stem.stride,
        "-",
        1
    );
    let shapes = spec.module_shapes();
    let mut rows: Vec<(String, String, String, usize, usize, usize)> = Vec::new();
    for ((s_idx, _, m), shape) in spec.modules().zip(shapes) {
        let stage = spec.stages[s_idx].name.clone();
        let kind = format!("{:?}", m.variant).to_lowercase().replace("address", "address-");
        let output = format!("{}x{}x{}", shape.h_out, shape.w_out, m.c_out);
        match rows.last_mut() {
            Some(r) if r.0 == stage && r.2 == output && r.3 == m.stride && r.4 == m.expansion => r.5 += 1,
            _ => rows.push((stage, kind, output, m.stride, m.expansion, 1)),
        }
    }
    for (stage, kind, output, stride, e, rep) in rows {
        let _ = writeln!(s, "{stage:<8}  {kind:<18}  {output:>14}  {stride:>6}  {e:>3}  {rep:>6}");
    }
    let _ = writeln!(
        s,
        "{:<8}  {:<18}  {:>14}  {:>6}  {:>3}  {:>6}",
        "head",
        "pool+fc",
        format!("1x1x{}", spec.classes),
        "-",
        "-",
        1
    );
    s
}
