//! `lapfmm`: data generation, precomputation, runs, verification,
//! benchmarks and tree statistics. Reports are JSON documents written to
//! stdout or `--out`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lapfmm::persistence::{read_particles, save_cache, write_particles};
use lapfmm::{
    direct, relative_error, sample, Distribution, DistributionKind, Domain, Fmm, FmmConfig, FmmError,
    InteractionLists, LinearTree, ListStats, OperatorCache, ParticleSet, SizeStats,
};

const THREADS_ENV: &str = "FMM_NUM_THREADS";

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "lapfmm", version, about = "Kernel-independent FMM for the 3D Laplace kernel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic particle file.
    Generate(GenerateArgs),
    /// Build the operator cache for a particle file's domain.
    Precompute(InputArgs),
    /// Evaluate potentials and report timings.
    Run(RunArgs),
    /// Evaluate and compare against direct summation.
    Verify(VerifyArgs),
    /// Time the FMM (and optionally direct summation) over a range of sizes.
    Bench(BenchArgs),
    /// Build the tree and interaction lists only and report their statistics.
    Stats(InputArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "sphere-surface", value_parser = parse_kind)]
    distribution: DistributionKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Particle file to write.
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by every FMM subcommand. Flags override `--config`,
/// which overrides the defaults.
#[derive(Args, Clone, Default)]
struct FmmFlags {
    /// JSON file with any of the fields below (snake_case).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    p_check: Option<usize>,
    #[arg(long)]
    n_crit: Option<usize>,
    #[arg(long)]
    alpha_inner: Option<f64>,
    #[arg(long)]
    alpha_outer: Option<f64>,
    #[arg(long)]
    svd_cutoff: Option<f64>,
    /// Worker threads; overrides FMM_NUM_THREADS.
    #[arg(long)]
    threads: Option<usize>,
    /// Operator cache file, loaded when it matches and written otherwise.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    l2p_cache_local: Option<bool>,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    fmm: FmmFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: InputArgs,
    /// Also compute the direct sum and report the relative error.
    #[arg(long)]
    verify: bool,
    /// Write potentials (u64 count, then f64 values, little-endian).
    #[arg(long)]
    potentials: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: InputArgs,
    /// Exit with status 3 when the relative error exceeds this.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated particle counts, ascending.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    #[arg(long, default_value = "sphere-surface", value_parser = parse_kind)]
    distribution: DistributionKind,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Time direct summation for sizes up to this count.
    #[arg(long, default_value_t = 0)]
    direct_max: usize,
    #[command(flatten)]
    fmm: FmmFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<DistributionKind, String> {
    s.parse().map_err(|e: FmmError| e.to_string())
}

/// Optional overrides read from `--config`.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    p: Option<usize>,
    p_check: Option<usize>,
    n_crit: Option<usize>,
    alpha_inner: Option<f64>,
    alpha_outer: Option<f64>,
    svd_cutoff: Option<f64>,
    threads: Option<usize>,
    cache: Option<PathBuf>,
    l2p_cache_local: Option<bool>,
}

/// Error wrapper carrying an exit status.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn resolve_config(flags: &FmmFlags) -> anyhow::Result<FmmConfig> {
    let file = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ConfigFile>(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    let env_threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("{THREADS_ENV} must be a non-negative integer, got `{v}`")))?,
        ),
        Err(_) => None,
    };
    let d = FmmConfig::default();
    let config = FmmConfig {
        p: flags.p.or(file.p).unwrap_or(d.p),
        p_check: flags.p_check.or(file.p_check),
        n_crit: flags.n_crit.or(file.n_crit).unwrap_or(d.n_crit),
        alpha_inner: flags.alpha_inner.or(file.alpha_inner).unwrap_or(d.alpha_inner),
        alpha_outer: flags.alpha_outer.or(file.alpha_outer).unwrap_or(d.alpha_outer),
        svd_cutoff: flags.svd_cutoff.or(file.svd_cutoff).unwrap_or(d.svd_cutoff),
        threads: flags.threads.or(env_threads).or(file.threads).unwrap_or(d.threads),
        l2p_cache_local: flags.l2p_cache_local.or(file.l2p_cache_local).unwrap_or(d.l2p_cache_local),
        cache_path: flags.cache.clone().or(file.cache),
    };
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct ConfigEcho {
    p: usize,
    p_check: usize,
    n_crit: usize,
    alpha_inner: f64,
    alpha_outer: f64,
    svd_cutoff: f64,
    threads: usize,
    l2p_cache_local: bool,
    cache: Option<PathBuf>,
}

impl From<&FmmConfig> for ConfigEcho {
    fn from(c: &FmmConfig) -> Self {
        ConfigEcho {
            p: c.p,
            p_check: c.check_order(),
            n_crit: c.n_crit,
            alpha_inner: c.alpha_inner,
            alpha_outer: c.alpha_outer,
            svd_cutoff: c.svd_cutoff,
            threads: if c.threads == 0 { rayon_threads() } else { c.threads },
            l2p_cache_local: c.l2p_cache_local,
            cache: c.cache_path.clone(),
        }
    }
}

fn rayon_threads() -> usize {
    rayon::current_num_threads()
}

#[derive(Serialize)]
struct ListSummary {
    min: usize,
    mean: f64,
    max: usize,
}

impl From<SizeStats> for ListSummary {
    fn from(s: SizeStats) -> Self {
        ListSummary {
            min: s.min,
            mean: s.mean,
            max: s.max,
        }
    }
}

#[derive(Serialize)]
struct ListsReport {
    u: ListSummary,
    v: ListSummary,
    w: ListSummary,
    x: ListSummary,
}

impl From<ListStats> for ListsReport {
    fn from(s: ListStats) -> Self {
        ListsReport {
            u: s.u.into(),
            v: s.v.into(),
            w: s.w.into(),
            x: s.x.into(),
        }
    }
}

#[derive(Serialize)]
struct OperatorTime {
    operator: &'static str,
    seconds: f64,
    share: f64,
}

#[derive(Serialize)]
struct TimingReport {
    tree: f64,
    lists: f64,
    operators_setup: f64,
    evaluate: f64,
    total: f64,
    per_operator: Vec<OperatorTime>,
}

#[derive(Serialize)]
struct RunReport {
    config: ConfigEcho,
    n: usize,
    depth: u32,
    leaves: usize,
    nodes: usize,
    timings: TimingReport,
    lists: ListsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    relative_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    direct_seconds: Option<f64>,
}

fn timing_report(t: &lapfmm::Timings) -> TimingReport {
    let ops = t.operators();
    let sum: f64 = ops.iter().map(|(_, s)| s).sum();
    TimingReport {
        tree: t.tree,
        lists: t.lists,
        operators_setup: t.operators,
        evaluate: t.evaluate,
        total: t.setup() + t.evaluate,
        per_operator: ops
            .iter()
            .map(|&(operator, seconds)| OperatorTime {
                operator,
                seconds,
                share: if sum > 0.0 { seconds / sum } else { 0.0 },
            })
            .collect(),
    }
}

fn emit<S: Serialize>(report: &S, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n").map_err(|source| {
            FmmError::Io {
                path: path.to_path_buf(),
                source,
            }
            .into()
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn evaluate(args: &InputArgs, verify: bool) -> anyhow::Result<(RunReport, Fmm<f64>)> {
    let config = resolve_config(&args.fmm)?;
    let particles = read_particles(&args.input)?;
    let oracle = verify.then(|| {
        let timer = Instant::now();
        (direct(&particles), timer.elapsed().as_secs_f64())
    });
    let mut fmm = Fmm::new(particles, config)?;
    fmm.evaluate()?;
    let relative_error = match &oracle {
        Some((want, _)) => Some(relative_error(&fmm.potentials(), want)?),
        None => None,
    };
    let report = RunReport {
        config: (&fmm.config).into(),
        n: fmm.particles.len(),
        depth: fmm.tree.depth,
        leaves: fmm.tree.num_leaves(),
        nodes: fmm.tree.num_nodes(),
        timings: timing_report(&fmm.timings),
        lists: fmm.lists.stats(&fmm.tree).into(),
        relative_error,
        direct_seconds: oracle.map(|(_, s)| s),
    };
    Ok((report, fmm))
}

fn cmd_generate(args: &GenerateArgs) -> anyhow::Result<()> {
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let particles = sample::<f64>(&Distribution {
        kind: args.distribution,
        n: args.n,
        seed: args.seed,
    })?;
    write_particles(&particles, &args.out)?;
    Ok(())
}

#[derive(Serialize)]
struct PrecomputeReport {
    fingerprint: String,
    cache: PathBuf,
    n_equivalent: usize,
    n_check: usize,
    m2l_matrices: usize,
    seconds: f64,
}

fn cmd_precompute(args: &InputArgs) -> anyhow::Result<()> {
    let config = resolve_config(&args.fmm)?;
    let path = config
        .cache_path
        .clone()
        .ok_or_else(|| usage("precompute needs --cache"))?;
    let particles = read_particles(&args.input)?;
    let domain = Domain::bounding(&particles.positions)?;
    let timer = Instant::now();
    let cache = with_threads(config.threads, || OperatorCache::precompute(&config, &domain))??;
    let seconds = timer.elapsed().as_secs_f64();
    save_cache(&cache, &path)?;
    emit(
        &PrecomputeReport {
            fingerprint: cache.fingerprint.clone(),
            cache: path,
            n_equivalent: cache.n_e(),
            n_check: cache.n_c(),
            m2l_matrices: cache.m2l_entries().count(),
            seconds,
        },
        args.out.as_deref(),
    )
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> anyhow::Result<R> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| FmmError::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let (report, fmm) = evaluate(&args.common, args.verify)?;
    if let Some(path) = &args.potentials {
        let phi = fmm.potentials();
        let mut bytes = Vec::with_capacity(8 + 8 * phi.len());
        bytes.extend_from_slice(&(phi.len() as u64).to_le_bytes());
        for v in phi {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|source| FmmError::Io {
            path: path.clone(),
            source,
        })?;
    }
    emit(&report, args.common.out.as_deref())
}

/// Relative error above the requested tolerance.
#[derive(Debug)]
struct ToleranceExceeded(f64, f64);

impl std::fmt::Display for ToleranceExceeded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "relative error {:e} exceeds tolerance {:e}", self.0, self.1)
    }
}

impl std::error::Error for ToleranceExceeded {}

fn cmd_verify(args: &VerifyArgs) -> anyhow::Result<()> {
    let (report, _) = evaluate(&args.common, true)?;
    emit(&report, args.common.out.as_deref())?;
    let err = report.relative_error.unwrap_or(f64::NAN);
    if !(err <= args.tolerance) {
        return Err(ToleranceExceeded(err, args.tolerance).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct MeanStd {
    mean: f64,
    std: f64,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Serialize)]
struct BenchRow {
    n: usize,
    depth: u32,
    leaves: usize,
    /// Tree, lists and both passes; operator precomputation excluded.
    total: MeanStd,
    evaluate: MeanStd,
    per_operator: Vec<(String, MeanStd)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    direct: Option<MeanStd>,
}

#[derive(Serialize)]
struct BenchReport {
    config: ConfigEcho,
    distribution: String,
    repeats: usize,
    rows: Vec<BenchRow>,
    /// Least-squares slope of log(total) against log(n).
    fmm_slope: Option<f64>,
    direct_slope: Option<f64>,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn cmd_bench(args: &BenchArgs) -> anyhow::Result<()> {
    if args.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    if args.sizes.windows(2).any(|w| w[0] >= w[1]) || args.sizes.contains(&0) {
        return Err(usage("--sizes must be positive and strictly ascending"));
    }
    let config = resolve_config(&args.fmm)?;
    let mut rows = Vec::new();
    for &n in &args.sizes {
        let particles = sample::<f64>(&Distribution {
            kind: args.distribution,
            n,
            seed: args.seed,
        })?;
        let domain = Domain::bounding(&particles.positions)?;
        let cache = with_threads(config.threads, || lapfmm::fmm::load_or_precompute(&config, &domain))??;
        let cache = std::sync::Arc::new(cache);
        let mut totals = Vec::new();
        let mut evals = Vec::new();
        let mut per_op: Vec<Vec<f64>> = vec![Vec::new(); 8];
        let mut shape = (0, 0);
        for _ in 0..args.repeats {
            let mut fmm = Fmm::with_cache(particles.clone(), config.clone(), domain, cache.clone())?;
            fmm.evaluate()?;
            let t = fmm.timings;
            totals.push(t.tree + t.lists + t.evaluate);
            evals.push(t.evaluate);
            for (slot, (_, s)) in per_op.iter_mut().zip(t.operators()) {
                slot.push(s);
            }
            shape = (fmm.tree.depth, fmm.tree.num_leaves());
        }
        let direct_times = (n <= args.direct_max).then(|| {
            (0..args.repeats)
                .map(|_| {
                    let timer = Instant::now();
                    let _ = with_threads(config.threads, || direct(&particles));
                    timer.elapsed().as_secs_f64()
                })
                .collect::<Vec<_>>()
        });
        let names = lapfmm::Timings::default().operators().map(|(name, _)| name.to_string());
        rows.push(BenchRow {
            n,
            depth: shape.0,
            leaves: shape.1,
            total: mean_std(&totals),
            evaluate: mean_std(&evals),
            per_operator: names.into_iter().zip(per_op.iter().map(|v| mean_std(v))).collect(),
            direct: direct_times.as_deref().map(mean_std),
        });
    }
    let fmm_slope = loglog_slope(&rows.iter().map(|r| (r.n as f64, r.total.mean)).collect::<Vec<_>>());
    let direct_points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.direct.as_ref().map(|d| (r.n as f64, d.mean)))
        .collect();
    emit(
        &BenchReport {
            config: (&config).into(),
            distribution: args.distribution.to_string(),
            repeats: args.repeats,
            rows,
            fmm_slope,
            direct_slope: loglog_slope(&direct_points),
        },
        args.out.as_deref(),
    )
}

#[derive(Serialize)]
struct StatsReport {
    n: usize,
    n_crit: usize,
    depth: u32,
    leaves: usize,
    nodes: usize,
    overfull_leaves: usize,
    lists: ListsReport,
    seconds: f64,
}

fn cmd_stats(args: &InputArgs) -> anyhow::Result<()> {
    let config = resolve_config(&args.fmm)?;
    let mut particles: ParticleSet<f64> = read_particles(&args.input)?;
    let timer = Instant::now();
    let (tree, stats) = with_threads(config.threads, || -> lapfmm::Result<_> {
        let domain = Domain::bounding(&particles.positions)?;
        let tree = LinearTree::build(&mut particles, config.n_crit, domain)?;
        let stats = InteractionLists::build(&tree).stats(&tree);
        Ok((tree, stats))
    })??;
    emit(
        &StatsReport {
            n: particles.len(),
            n_crit: config.n_crit,
            depth: tree.depth,
            leaves: tree.num_leaves(),
            nodes: tree.num_nodes(),
            overfull_leaves: tree.overfull.len(),
            lists: stats.into(),
            seconds: timer.elapsed().as_secs_f64(),
        },
        args.out.as_deref(),
    )
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    if err.downcast_ref::<ToleranceExceeded>().is_some() {
        return EXIT_NUMERICAL;
    }
    match err.downcast_ref::<FmmError>() {
        Some(FmmError::InvalidArgument(_)) => EXIT_USAGE,
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Precompute(a) => cmd_precompute(a),
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Stats(a) => cmd_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
