//! `bsps`: run, predict and sweep streamed BSP kernels.
//!
//! Exit codes: 0 on success (and, for `run`, a verified result whose
//! accounted cost equals the prediction), 1 on usage or parameter errors,
//! 2 on a verification mismatch.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use bsps_core::algorithms::{run_cannon, run_inner_product, BlockMatrix, CannonPlan, Lcg};
use bsps_core::cost::{
    predict_cannon_profile, predict_inner_product_profile, solve_k_equal, sweep_cannon, sweep_csv,
    CostProfile,
};
use bsps_core::machine::PRESETS;
use bsps_core::{bsps_cost, Classification, MachineParams, Trace};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "bsps",
    version,
    about = "Simulate and cost streamed BSP kernels on accelerator models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Inspect machine parameters.
    #[command(subcommand)]
    Machine(MachineCmd),
    /// Execute a kernel on the simulator and check its cost and result.
    #[command(subcommand)]
    Run(RunCmd),
    /// Evaluate the closed-form cost of a kernel.
    #[command(subcommand)]
    Predict(PredictCmd),
    /// Tabulate predicted costs over a parameter grid.
    #[command(subcommand)]
    Sweep(SweepCmd),
}

#[derive(Subcommand, Debug)]
enum MachineCmd {
    /// Print a machine's parameters and derived quantities.
    Show {
        /// Preset name or path to a `key = value` config file.
        source: String,
    },
}

#[derive(Args, Debug)]
struct MachineArg {
    /// Preset name or path to a config file.
    #[arg(long, default_value = "epiphany3")]
    machine: String,
}

#[derive(Subcommand, Debug)]
enum RunCmd {
    InnerProduct(RunInner),
    Cannon(RunCannon),
}

#[derive(Args, Debug)]
struct RunInner {
    #[command(flatten)]
    machine: MachineArg,
    /// Vector length; a multiple of p times the token size.
    #[arg(long)]
    n: usize,
    /// Words per token.
    #[arg(long)]
    token_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First operand: uniform, const:<x> or file:<path>.
    #[arg(long, default_value = "uniform")]
    v: String,
    /// Second operand, same forms as --v.
    #[arg(long, default_value = "uniform")]
    u: String,
    /// Write the trace CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunCannon {
    #[command(flatten)]
    machine: MachineArg,
    /// Matrix order.
    #[arg(long)]
    n: usize,
    /// Core grid side N; defaults to the square root of p.
    #[arg(long)]
    grid: Option<usize>,
    /// Outer blocks per side M.
    #[arg(long)]
    outer: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Left operand: uniform, identity, const:<x> or file:<path>.
    #[arg(long, default_value = "uniform")]
    a: String,
    /// Right operand, same forms as --a.
    #[arg(long, default_value = "uniform")]
    b: String,
    /// Write the trace CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum PredictCmd {
    InnerProduct {
        #[command(flatten)]
        machine: MachineArg,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        token_size: usize,
    },
    Cannon {
        #[command(flatten)]
        machine: MachineArg,
        /// Matrix order (not needed with --k-equal).
        #[arg(long, required_unless_present = "k_equal")]
        n: Option<usize>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, required_unless_present = "k_equal")]
        outer: Option<usize>,
        /// Only report the inner block orders where fetch and compute balance.
        #[arg(long)]
        k_equal: bool,
    },
}

#[derive(Subcommand, Debug)]
enum SweepCmd {
    Cannon {
        #[command(flatten)]
        machine: MachineArg,
        /// Matrix orders, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        /// Inner block orders, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long)]
        grid: Option<usize>,
        /// Also execute every point and record the accounted cost.
        #[arg(long)]
        execute: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Whether a `run` verified.
#[derive(Debug, PartialEq, Eq)]
enum Outcome {
    Ok,
    Mismatch,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Mismatch) => ExitCode::from(2),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Machine(MachineCmd::Show { source }) => {
            let (name, m) = load_machine(&source)?;
            print!("{}", machine_report(&name, &m));
            Ok(Outcome::Ok)
        }
        Command::Run(RunCmd::InnerProduct(args)) => run_inner(args),
        Command::Run(RunCmd::Cannon(args)) => run_cannon_cmd(args),
        Command::Predict(PredictCmd::InnerProduct {
            machine,
            n,
            token_size,
        }) => {
            let (name, m) = load_machine(&machine.machine)?;
            let profile = predict_inner_product_profile(n, token_size, &m)?;
            println!("machine: {name}");
            println!("inner product: n = {n}, C = {token_size}, p = {}", m.p);
            print_profile(&profile, &m);
            Ok(Outcome::Ok)
        }
        Command::Predict(PredictCmd::Cannon {
            machine,
            n,
            grid,
            outer,
            k_equal,
        }) => {
            let (name, m) = load_machine(&machine.machine)?;
            let (grid, m) = grid_machine(grid, &m)?;
            println!("machine: {name}");
            if !k_equal {
                let (n, outer) = (
                    n.expect("required by clap"),
                    outer.expect("required by clap"),
                );
                let plan = CannonPlan::new(n, grid, outer, &m)?;
                let profile = predict_cannon_profile(n, grid, outer, &m)?;
                println!(
                    "cannon: n = {n}, N = {grid}, M = {outer}, k = {}, {} hypersteps",
                    plan.k,
                    profile.hypersteps.len()
                );
                print_profile(&profile, &m);
            }
            print!("{}", crossover_report(&name, &m, grid));
            Ok(Outcome::Ok)
        }
        Command::Sweep(SweepCmd::Cannon {
            machine,
            n,
            k,
            grid,
            execute,
            seed,
            out,
        }) => sweep(
            &machine.machine,
            &n,
            &k,
            grid,
            execute,
            seed,
            out.as_deref(),
        ),
    }
}

/// Formats like C's `%g`: six significant digits, trailing zeros removed.
fn fmt_g(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mantissa));
    }
    let decimals = (5 - exp) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn load_machine(source: &str) -> Result<(String, MachineParams)> {
    if PRESETS.contains(&source) {
        return Ok((source.to_string(), MachineParams::from_preset(source)?));
    }
    let path = Path::new(source);
    if !path.exists() {
        bail!(
            "`{source}` is neither a machine preset ({}) nor a readable config file",
            PRESETS.join(", ")
        );
    }
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read machine config `{source}`"))?;
    let m = MachineParams::from_config(&text)
        .with_context(|| format!("invalid machine config `{source}`"))?;
    Ok((source.to_string(), m))
}

/// Resolves the Cannon grid side. A grid smaller than the machine runs on
/// the first `N²` cores.
fn grid_machine(grid: Option<usize>, m: &MachineParams) -> Result<(usize, MachineParams)> {
    let grid = match grid {
        Some(g) => g,
        None => {
            let root = (m.p as f64).sqrt().round() as usize;
            if root * root != m.p {
                bail!("p = {} is not a square; pass --grid", m.p);
            }
            root
        }
    };
    if grid == 0 {
        bail!("grid must be ≥ 1");
    }
    let cores = grid * grid;
    if cores > m.p {
        bail!(
            "a {grid}×{grid} grid needs {cores} cores but the machine has p = {}",
            m.p
        );
    }
    if cores < m.p {
        eprintln!(
            "note: using {cores} of {} cores for a {grid}×{grid} grid",
            m.p
        );
    }
    Ok((grid, m.with_cores(cores)))
}

fn machine_report(name: &str, m: &MachineParams) -> String {
    let mut s = String::new();
    s.push_str(&format!("machine: {name}\n"));
    s.push_str(&format!("p = {} cores\n", m.p));
    s.push_str(&format!("r = {} FLOP/s\n", fmt_g(m.r)));
    s.push_str(&format!("g = {} FLOP/word\n", fmt_g(m.g)));
    s.push_str(&format!("l = {} FLOP\n", fmt_g(m.l)));
    s.push_str(&format!("e = {} FLOP/word\n", fmt_g(m.e)));
    s.push_str(&format!(
        "L = {} words ({} bytes)\n",
        m.local_words,
        m.local_words * m.word_bytes
    ));
    s.push_str(&format!(
        "E = {} words ({} bytes)\n",
        m.external_words,
        m.external_words * m.word_bytes
    ));
    s.push_str(&format!("word size = {} bytes\n", m.word_bytes));
    s.push_str(&format!(
        "external bandwidth = {} MB/s\n",
        fmt_g(m.external_bandwidth_mb_s())
    ));
    s.push_str(&format!(
        "inter-core bandwidth = {} MB/s\n",
        fmt_g(m.intercore_bandwidth_mb_s())
    ));
    s.push_str(&format!("latency = {} us\n", fmt_g(m.latency_us())));
    s
}

fn class_summary(profile: &CostProfile) -> String {
    profile
        .classes()
        .iter()
        .map(|&c| {
            let count = profile.hypersteps.iter().filter(|h| h.class == c).count();
            format!("{count} {c}")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn print_profile(profile: &CostProfile, m: &MachineParams) {
    let total = profile.total();
    println!("predicted cost: {} FLOP", fmt_g(total));
    println!("hypersteps: {}", class_summary(profile));
    println!(
        "wall time: {} s at r = {} FLOP/s",
        fmt_g(m.flops_to_seconds(total)),
        fmt_g(m.r)
    );
}

fn crossover_report(name: &str, m: &MachineParams, grid: usize) -> String {
    let roots = solve_k_equal(m, grid);
    let mut s = String::new();
    if roots.is_empty() {
        s.push_str(&format!(
            "k_equal (N = {grid}): none; hypersteps are compute-heavy for every k\n"
        ));
    } else {
        let listed: Vec<String> = roots.iter().map(|&r| fmt_g(r)).collect();
        s.push_str(&format!("k_equal (N = {grid}): {}\n", listed.join(", ")));
        if roots.len() == 2 {
            s.push_str(&format!(
                "bandwidth-heavy for {} < k < {}, compute-heavy otherwise\n",
                listed[0], listed[1]
            ));
        }
    }
    let e3 = MachineParams::epiphany3();
    if name == "epiphany3" && grid == 4 && *m == e3.with_cores(16) {
        s.push_str(
            "note: the published estimate for this machine is k_equal ≈ 8; it does not follow from these parameters\n",
        );
    }
    s
}

/// Parses an operand source into `len` values.
fn vector_source(spec: &str, len: usize, rng: &mut Lcg) -> Result<Vec<f32>> {
    if spec == "uniform" {
        return Ok(rng.fill(len));
    }
    if let Some(v) = spec.strip_prefix("const:") {
        let x: f32 = v.parse().map_err(|_| anyhow!("`{v}` is not a number"))?;
        return Ok(vec![x; len]);
    }
    if let Some(path) = spec.strip_prefix("file:") {
        let bytes = fs::read(path).with_context(|| format!("cannot read `{path}`"))?;
        if bytes.len() != 4 * len {
            bail!(
                "`{path}` holds {} bytes, expected {} little-endian f32 values",
                bytes.len(),
                len
            );
        }
        return Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect());
    }
    bail!("unknown operand source `{spec}` (expected uniform, const:<x> or file:<path>)")
}

fn matrix_source(spec: &str, n: usize, rng: &mut Lcg) -> Result<BlockMatrix> {
    if spec == "identity" {
        return Ok(BlockMatrix::identity(n));
    }
    Ok(BlockMatrix::new(n, vector_source(spec, n * n, rng)?)?)
}

fn write_trace(trace: &Trace, out: Option<&Path>) -> Result<()> {
    if let Some(path) = out {
        fs::write(path, trace.to_csv())
            .with_context(|| format!("cannot write `{}`", path.display()))?;
        println!("trace: {}", path.display());
    }
    Ok(())
}

fn report_costs(trace: &Trace, predicted: f64) -> bool {
    let accounted = bsps_cost(trace);
    println!("accounted cost: {} FLOP", fmt_g(accounted));
    println!("predicted cost: {} FLOP", fmt_g(predicted));
    println!("difference: {}", fmt_g(accounted - predicted));
    println!(
        "wall time: {} s",
        fmt_g(trace.machine.flops_to_seconds(accounted))
    );
    accounted == predicted
}

fn run_inner(args: RunInner) -> Result<Outcome> {
    let (name, m) = load_machine(&args.machine.machine)?;
    let profile = predict_inner_product_profile(args.n, args.token_size, &m)?;
    let mut rng = Lcg::new(args.seed);
    let v = vector_source(&args.v, args.n, &mut rng)?;
    let u = vector_source(&args.u, args.n, &mut rng)?;

    let run = run_inner_product(&m, &v, &u, args.token_size)?;
    println!("machine: {name}");
    let costs_match = report_costs(&run.trace, profile.total());
    write_trace(&run.trace, args.out.as_deref())?;

    let reference: f64 = v.iter().zip(&u).map(|(&a, &b)| a as f64 * b as f64).sum();
    let scale: f64 = v
        .iter()
        .zip(&u)
        .map(|(&a, &b)| (a as f64 * b as f64).abs())
        .sum::<f64>()
        .max(1.0);
    let alpha = run.alphas[0];
    let agree = run.alphas.iter().all(|&a| a == alpha);
    let error = (alpha as f64 - reference).abs() / scale;
    println!("alpha: {}", fmt_g(alpha as f64));
    let verified = agree && error <= 1e-5;
    println!(
        "verification: {} (relative error {}{})",
        if verified { "pass" } else { "FAIL" },
        fmt_g(error),
        if agree { "" } else { ", cores disagree" }
    );
    Ok(if verified && costs_match {
        Outcome::Ok
    } else {
        Outcome::Mismatch
    })
}

fn run_cannon_cmd(args: RunCannon) -> Result<Outcome> {
    let (name, m) = load_machine(&args.machine.machine)?;
    let (grid, m) = grid_machine(args.grid, &m)?;
    let plan = CannonPlan::new(args.n, grid, args.outer, &m)?;
    let profile = predict_cannon_profile(args.n, grid, args.outer, &m)?;
    let mut rng = Lcg::new(args.seed);
    let a = matrix_source(&args.a, args.n, &mut rng)?;
    let b = matrix_source(&args.b, args.n, &mut rng)?;

    let run = run_cannon(&m, &a, &b, &plan)?;
    println!("machine: {name}");
    println!(
        "cannon: n = {}, N = {grid}, M = {}, k = {}",
        args.n, args.outer, plan.k
    );
    let costs_match = report_costs(&run.trace, profile.total());
    write_trace(&run.trace, args.out.as_deref())?;

    let error = run.product.relative_error(&a.matmul(&b));
    println!(
        "frobenius norm of C: {}",
        fmt_g(run.product.frobenius_norm())
    );
    let verified = error < 1e-4;
    println!(
        "verification: {} (relative error {})",
        if verified { "pass" } else { "FAIL" },
        fmt_g(error)
    );
    Ok(if verified && costs_match {
        Outcome::Ok
    } else {
        Outcome::Mismatch
    })
}

fn sweep(
    source: &str,
    orders: &[usize],
    ks: &[usize],
    grid: Option<usize>,
    execute: bool,
    seed: u64,
    out: Option<&Path>,
) -> Result<Outcome> {
    let (_, m) = load_machine(source)?;
    let (grid, m) = grid_machine(grid, &m)?;
    let mut rows = sweep_cannon(&m, grid, orders, ks)?;
    let mut outcome = Outcome::Ok;
    if execute {
        for row in &mut rows {
            let plan = CannonPlan::new(row.n, grid, row.outer, &m)?;
            let mut rng = Lcg::new(seed);
            let a = BlockMatrix::uniform(row.n, &mut rng);
            let b = BlockMatrix::uniform(row.n, &mut rng);
            let run = run_cannon(&m, &a, &b, &plan)?;
            let accounted = bsps_cost(&run.trace);
            if accounted != row.predicted {
                eprintln!(
                    "mismatch at n = {}, k = {}: accounted {} vs predicted {}",
                    row.n,
                    row.k,
                    fmt_g(accounted),
                    fmt_g(row.predicted)
                );
                outcome = Outcome::Mismatch;
            }
            row.accounted = Some(accounted);
        }
    }
    let csv = sweep_csv(&rows, &m);
    match out {
        Some(path) => {
            fs::write(path, csv).with_context(|| format!("cannot write `{}`", path.display()))?;
            let heavy = rows
                .iter()
                .filter(|r| r.hyperstep.class == Classification::BandwidthHeavy)
                .count();
            println!(
                "{} rows ({heavy} bandwidth-heavy) written to {}",
                rows.len(),
                path.display()
            );
        }
        None => print!("{csv}"),
    }
    Ok(outcome)
}
