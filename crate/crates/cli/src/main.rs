//! `certicut` command line: verify one instance, benchmark a suite of
//! instances under all three methods, or generate reproducible instances.
//!
//! Exit codes are a contract: 0 every safe-set row certified, 1 completed
//! but undecided, 2 any error.

mod gen;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use certicut::bounds::interval_propagate;
use certicut::network::{load_network, load_problem, random_network, save_network, save_problem};
use certicut::report::{
    render_benchmark_table, render_verify_summary, summarize_mode, to_jsonl, BenchRecord,
    RowRecord,
};
use certicut::solver::SolverConfig;
use certicut::verifier::{
    certify, certify_penalized, certify_sdp_only, BoundMode, Certificate, VerifierConfig,
};
use certicut::{par, Error, InputBox, Network, SafeSet};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

/// Accuracy parameter of the penalized baseline; the penalty weight is
/// 1 / (2 sqrt(delta)).
const PENALTY_DELTA: f64 = 1e-2;

#[derive(Parser)]
#[command(
    name = "certicut",
    version,
    about = "Certify relu-network robustness on box inputs via a lifted SDP relaxation strengthened with disjunctive cuts"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Certify one network/problem pair.
    Verify(VerifyArgs),
    /// Run sdp, alg1, and penalized over a manifest of instances.
    Benchmark(BenchArgs),
    /// Generate a reproducible network and margin problem.
    Gen(GenArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Plain relaxation, one solve per row.
    Sdp,
    /// Iterative strengthening with disjunctive cuts.
    Alg1,
    /// Iterated linearized penalty on the objective variance.
    Penalized,
}

impl Mode {
    fn as_str(self) -> &'static str {
        match self {
            Mode::Sdp => "sdp",
            Mode::Alg1 => "alg1",
            Mode::Penalized => "penalized",
        }
    }
}

const MODES: [Mode; 3] = [Mode::Sdp, Mode::Alg1, Mode::Penalized];

/// Tuning shared by verify and benchmark.
#[derive(Args, Debug, Clone)]
struct TuneArgs {
    /// Interior partition points per disjunction.
    #[arg(long, default_value_t = 5, env = "CERTICUT_Q")]
    q: usize,
    /// Cut rounds after the base solve; also the penalized round count.
    #[arg(long, default_value_t = 10, env = "CERTICUT_MAX_ITER")]
    max_iter: usize,
    /// Eigenvalue threshold for extracting cut directions.
    #[arg(long, default_value_t = 1e-5, env = "CERTICUT_GAMMA")]
    gamma: f64,
    /// Override the problem file's perturbation radius.
    #[arg(long, env = "CERTICUT_EPSILON")]
    epsilon: Option<f64>,
    /// Seed for the sampling attack.
    #[arg(long, default_value_t = 0, env = "CERTICUT_SEED")]
    seed: u64,
    /// Worker threads for row fan-out; 0 means all cores.
    #[arg(long, default_value_t = 0, env = "CERTICUT_JOBS")]
    jobs: usize,
    /// Conic solver acceptance tolerance.
    #[arg(long, env = "CERTICUT_SOLVER_TOL")]
    solver_tol: Option<f64>,
    /// Tighten per-direction ranges with auxiliary relaxation solves.
    #[arg(long, default_value_t = false, env = "CERTICUT_TIGHTEN_BOUNDS")]
    tighten_bounds: bool,
}

impl TuneArgs {
    fn verifier_config(&self) -> VerifierConfig {
        let mut solver = SolverConfig::default();
        if let Some(tol) = self.solver_tol {
            solver.accept_tol = tol;
            solver.abs_tol = solver.abs_tol.min(1e-2 * tol);
            solver.rel_tol = solver.rel_tol.min(1e-2 * tol);
        }
        VerifierConfig {
            q: self.q,
            max_iter: self.max_iter,
            gamma: self.gamma,
            seed: self.seed,
            bound_mode: if self.tighten_bounds {
                BoundMode::AuxSdp
            } else {
                BoundMode::Interval
            },
            solver,
            ..VerifierConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Network file (JSON).
    #[arg(long, env = "CERTICUT_NETWORK")]
    network: PathBuf,
    /// Problem file (JSON input box and safe set).
    #[arg(long, env = "CERTICUT_PROBLEM")]
    problem: PathBuf,
    /// Certification method.
    #[arg(long, value_enum, default_value_t = Mode::Alg1, env = "CERTICUT_MODE")]
    mode: Mode,
    /// Directory for rows.jsonl and summary.txt; nothing written when absent.
    #[arg(long, env = "CERTICUT_OUT")]
    out: Option<PathBuf>,
    #[command(flatten)]
    tune: TuneArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// JSON manifest {"instances": [{"name", "network", "problem"}, ...]};
    /// paths resolve relative to the manifest file.
    #[arg(long, env = "CERTICUT_MANIFEST")]
    manifest: PathBuf,
    /// Directory for bench.jsonl and bench_summary.txt.
    #[arg(long, default_value = "bench-out", env = "CERTICUT_OUT")]
    out: PathBuf,
    #[command(flatten)]
    tune: TuneArgs,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Comma-separated layer widths, input first (e.g. 2,4,4,2).
    #[arg(long, value_delimiter = ',', required = true)]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0, env = "CERTICUT_SEED")]
    seed: u64,
    /// Uniform weight scale for random networks.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Train on the bundled two-blob dataset instead of keeping raw random
    /// weights; needs 2 inputs and 2 outputs.
    #[arg(long, default_value_t = false)]
    train: bool,
    /// Perturbation radius; defaults to 0.15 up to depth 10, then 0.075.
    #[arg(long, env = "CERTICUT_EPSILON")]
    epsilon: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = ".", env = "CERTICUT_OUT")]
    out: PathBuf,
    /// Basename: writes <name>.net.json and <name>.problem.json.
    #[arg(long, default_value = "instance")]
    name: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    instances: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    network: String,
    problem: String,
}

fn main() -> ExitCode {
    let code = match Cli::parse().cmd {
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Benchmark(a) => cmd_benchmark(a),
        Cmd::Gen(a) => cmd_gen(a),
    };
    code.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}

/// Loads and cross-checks one instance, applying the epsilon override.
fn load_instance(
    network: &Path,
    problem: &Path,
    epsilon: Option<f64>,
) -> certicut::Result<(Network, InputBox, SafeSet)> {
    let net = load_network(network)?;
    let (mut bx, safe) = load_problem(problem)?;
    if let Some(eps) = epsilon {
        bx = InputBox::new(bx.center.clone(), eps)?;
    }
    if bx.dim() != net.input_dim() {
        return Err(Error::Dimension(format!(
            "problem is {}-dimensional, network expects {}",
            bx.dim(),
            net.input_dim()
        )));
    }
    if safe.c.ncols() != net.output_dim() {
        return Err(Error::Dimension(format!(
            "safe set over {} outputs, network has {}",
            safe.c.ncols(),
            net.output_dim()
        )));
    }
    Ok((net, bx, safe))
}

fn run_mode(
    mode: Mode,
    net: &Network,
    bx: &InputBox,
    safe: &SafeSet,
    cfg: &VerifierConfig,
) -> certicut::Result<Certificate> {
    let bounds = interval_propagate(net, bx)?;
    match mode {
        Mode::Sdp => certify_sdp_only(net, bx, safe, &bounds, cfg),
        Mode::Alg1 => certify(net, bx, safe, &bounds, cfg),
        Mode::Penalized => {
            certify_penalized(net, bx, safe, &bounds, cfg, cfg.max_iter, PENALTY_DELTA)
        }
    }
}

/// Write-then-rename so readers never see a half-written report.
fn write_atomic(path: &Path, text: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<ExitCode> {
    par::configure_threads(a.tune.jobs);
    let cfg = a.tune.verifier_config();
    cfg.validate()?;
    let (net, bx, safe) = load_instance(&a.network, &a.problem, a.tune.epsilon)
        .with_context(|| format!("loading {} / {}", a.network.display(), a.problem.display()))?;
    let t0 = Instant::now();
    let cert = run_mode(a.mode, &net, &bx, &safe, &cfg)?;
    let wall = t0.elapsed().as_secs_f64();
    let records: Vec<RowRecord> = cert.rows.iter().map(RowRecord::from).collect();
    let summary = render_verify_summary(&records, wall);
    print!("{summary}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("rows.jsonl"), &to_jsonl(&records)?)?;
        write_atomic(&dir.join("summary.txt"), &summary)?;
    }
    Ok(if cert.certified {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_benchmark(a: BenchArgs) -> anyhow::Result<ExitCode> {
    par::configure_threads(a.tune.jobs);
    let cfg = a.tune.verifier_config();
    cfg.validate()?;
    let text = fs::read_to_string(&a.manifest)
        .with_context(|| format!("reading {}", a.manifest.display()))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", a.manifest.display()))?;
    let base = a.manifest.parent().unwrap_or_else(|| Path::new("."));

    let mut records: Vec<BenchRecord> = Vec::new();
    let mut seconds: Vec<f64> = Vec::new();
    for inst in &manifest.instances {
        let loaded = load_instance(
            &base.join(&inst.network),
            &base.join(&inst.problem),
            a.tune.epsilon,
        );
        for mode in MODES {
            let t0 = Instant::now();
            let rec = match &loaded {
                Ok((net, bx, safe)) => match run_mode(mode, net, bx, safe, &cfg) {
                    Ok(cert) => BenchRecord::from_certificate(&inst.name, mode.as_str(), &cert),
                    Err(e) => BenchRecord::from_error(&inst.name, mode.as_str(), &e),
                },
                Err(e) => BenchRecord::from_error(&inst.name, mode.as_str(), e),
            };
            let secs = t0.elapsed().as_secs_f64();
            eprintln!(
                "[{}] {}: {} in {secs:.2}s",
                mode.as_str(),
                inst.name,
                match &rec.error {
                    Some(e) => format!("error ({e})"),
                    None if rec.certified => "certified".to_string(),
                    None => "undecided".to_string(),
                },
            );
            records.push(rec);
            seconds.push(secs);
        }
    }

    let mut rows = Vec::new();
    for mode in MODES {
        let mut recs = Vec::new();
        let mut secs = Vec::new();
        for (r, &s) in records.iter().zip(&seconds) {
            if r.mode == mode.as_str() {
                recs.push(r.clone());
                secs.push(s);
            }
        }
        rows.push(summarize_mode(mode.as_str(), &recs, &secs));
    }
    let summary = format!(
        "backend: {}\ninstances: {}\n\n{}",
        par::backend_name(),
        manifest.instances.len(),
        render_benchmark_table(&rows)
    );
    print!("{summary}");
    fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join("bench.jsonl"), &to_jsonl(&records)?)?;
    write_atomic(&a.out.join("bench_summary.txt"), &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<ExitCode> {
    let depth = a.dims.len().saturating_sub(1);
    let (net, data) = if a.train {
        (
            gen::train_toy(&a.dims, a.seed, 300, 0.15)?,
            Some(gen::toy_dataset(a.seed)),
        )
    } else {
        (random_network(&a.dims, a.seed, a.scale)?, None)
    };
    if let Some(data) = &data {
        println!("toy training loss {:.4}", gen::toy_loss(&net, data));
    }
    let (center, pred) = gen::pick_center(&net, a.seed, data.as_deref())?;
    let eps = a.epsilon.unwrap_or_else(|| gen::default_epsilon(depth));
    let bx = InputBox::new(center, eps)?;
    let safe = SafeSet::new(gen::margin_rows(net.output_dim(), pred))?;
    fs::create_dir_all(&a.out)?;
    let net_path = a.out.join(format!("{}.net.json", a.name));
    let prob_path = a.out.join(format!("{}.problem.json", a.name));
    save_network(&net, &net_path)?;
    save_problem(&bx, &safe, &prob_path)?;
    println!(
        "wrote {} and {} (predicted class {pred}, epsilon {eps})",
        net_path.display(),
        prob_path.display()
    );
    Ok(ExitCode::SUCCESS)
}
