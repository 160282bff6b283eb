//! `darbkit` command-line interface.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or precondition
//! error, 3 corrupt or malformed data.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::analysis::{
    block_occupancy, empty_block_salience, pruning_ratio, retained_salience, row_density_histogram,
    storage_report, IndexBudgetNote, DEFAULT_WEIGHT_BITS,
};
use crate::decoder_sim::SimulationConfig;
use crate::error::{Error, Result};
use crate::formats::{
    block_encode, darb_encode, dense_matvec, first_spmv_violation, rcsr_encode, AnyContainer,
    FormatKind, SparseContainer, DEFAULT_GAP_BITS,
};
use crate::pruning::{
    block_prune_mask, bmwm_mask, compute_density_summary, darb_block_sizes, darb_mask,
    irregular_mask, BlockSizePlan, EmptyRowPolicy, DEFAULT_CAP,
};
use crate::report::{Report, RunManifest};
use crate::tensor_io::{
    apply_mask, gen_synthetic, load_mask, load_matrix, save_mask, save_matrix, WeightDist,
};

#[derive(Debug, Parser)]
#[command(
    name = "darbkit",
    version,
    about = "Structured pruning masks, sparse weight containers and decoder models"
)]
pub struct Cli {
    /// Seed for anything random (required by `gen`, defaults to 0 for `verify`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for row-parallel work.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Primary output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic DWMX matrix.
    Gen(GenArgs),
    /// Derive a DMSK pruning mask (and a DPLN plan for darb).
    Prune(PruneArgs),
    /// Encode a matrix and mask into a sparse container.
    Encode(EncodeArgs),
    /// Decode a sparse container back to a dense DWMX matrix.
    Decode(DecodeArgs),
    /// Compute analysis metrics.
    Report(ReportArgs),
    /// Compare decoder efficiencies from a TOML config.
    Simulate(SimulateArgs),
    /// Check a container against its matrix and mask.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub rows: usize,
    #[arg(long)]
    pub cols: usize,
    /// `gaussian:MEAN,STD` or `uniform:LO,HI`.
    #[arg(long, default_value = "gaussian:0,1")]
    pub dist: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scheme {
    Irregular,
    Bmwm,
    Block,
    Darb,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, value_enum)]
    pub scheme: Scheme,
    /// Target density for irregular, block and darb's reference pass.
    #[arg(long)]
    pub density: Option<f64>,
    /// Row block width for bmwm.
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub block_rows: usize,
    #[arg(long, default_value_t = 4)]
    pub block_cols: usize,
    /// Largest darb block size (power of two).
    #[arg(long, default_value_t = DEFAULT_CAP)]
    pub cap: u32,
    /// `cap` or `drop` for rows left empty by the reference mask.
    #[arg(long, default_value = "cap")]
    pub empty_policy: String,
    /// Precomputed reference mask for darb instead of an irregular pass.
    #[arg(long)]
    pub ref_mask: Option<PathBuf>,
    /// Where to write the darb plan (defaults to the mask path with `.dpln`).
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
    /// Write the summary report here instead of stdout.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub format: String,
    #[arg(long, default_value_t = DEFAULT_GAP_BITS)]
    pub gap_bits: u8,
    /// DPLN plan, required for darb.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub block_rows: usize,
    #[arg(long, default_value_t = 4)]
    pub block_cols: usize,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub container: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Comma-separated subset of density,occupancy,salience,ratio,storage.
    #[arg(long)]
    pub metrics: String,
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Reference mask for retained-salience comparison.
    #[arg(long)]
    pub ref_mask: Option<PathBuf>,
    #[arg(long)]
    pub container: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 10)]
    pub block: usize,
    #[arg(long, default_value_t = DEFAULT_WEIGHT_BITS)]
    pub weight_bits: u32,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub container: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    pub rtol: f64,
}

/// Result of a command that ran to completion.
#[derive(Debug)]
pub struct Outcome {
    pub report: Report,
    /// False when `verify` found a discrepancy.
    pub passed: bool,
    pub message: Option<String>,
}

impl Outcome {
    fn ok(report: Report) -> Self {
        Outcome {
            report,
            passed: true,
            message: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Metric {
    Density,
    Occupancy,
    Salience,
    Ratio,
    Storage,
}

fn parse_metrics(s: &str) -> Result<Vec<Metric>> {
    let metrics = s
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(|m| match m {
            "density" => Ok(Metric::Density),
            "occupancy" => Ok(Metric::Occupancy),
            "salience" => Ok(Metric::Salience),
            "ratio" => Ok(Metric::Ratio),
            "storage" => Ok(Metric::Storage),
            other => Err(usage(format!("unknown metric {other:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if metrics.is_empty() {
        return Err(usage("no metrics requested".into()));
    }
    Ok(metrics)
}

fn usage(msg: String) -> Error {
    Error::InvalidParameter(msg)
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

/// Executes a parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1".into()));
        }
        // Ignored if a pool already exists (e.g. repeated in-process runs).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, a),
        Command::Prune(a) => cmd_prune(cli, a),
        Command::Encode(a) => cmd_encode(cli, a),
        Command::Decode(a) => cmd_decode(cli, a),
        Command::Report(a) => cmd_report(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(cli, a),
    }
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> Result<Outcome> {
    let seed = *require(&cli.seed, "seed")?;
    let out = require(&cli.out, "out")?;
    let dist: WeightDist = a.dist.parse()?;
    let m = gen_synthetic(a.rows, a.cols, dist, seed)?;
    save_matrix(&m, out)?;

    let mut manifest = RunManifest::new("gen");
    manifest
        .param("rows", a.rows)
        .param("cols", a.cols)
        .param("dist", dist)
        .param("seed", seed);
    let mut report = Report::new(&manifest);
    report
        .set("gen.out", out.display().to_string())
        .set("gen.sha256", crate::report::file_digest(out)?);
    Ok(Outcome::ok(report))
}

fn default_plan_path(mask_out: &Path) -> PathBuf {
    mask_out.with_extension("dpln")
}

fn cmd_prune(cli: &Cli, a: &PruneArgs) -> Result<Outcome> {
    let out = require(&cli.out, "out")?;
    let m = load_matrix(&a.matrix)?;
    let mut manifest = RunManifest::new("prune");
    manifest.input(&a.matrix)?;
    manifest.param("scheme", format!("{:?}", a.scheme).to_lowercase());

    let mut plan: Option<BlockSizePlan> = None;
    let mask = match a.scheme {
        Scheme::Irregular => {
            let d = *require(&a.density, "density")?;
            manifest.param("density", d);
            irregular_mask(&m, d)?
        }
        Scheme::Bmwm => {
            let b = *require(&a.block, "block")?;
            manifest.param("block", b);
            bmwm_mask(&m, b)?
        }
        Scheme::Block => {
            let d = *require(&a.density, "density")?;
            manifest
                .param("density", d)
                .param("block_rows", a.block_rows)
                .param("block_cols", a.block_cols);
            block_prune_mask(&m, a.block_rows, a.block_cols, d)?
        }
        Scheme::Darb => {
            let policy: EmptyRowPolicy = a.empty_policy.parse()?;
            manifest
                .param("cap", a.cap)
                .param("empty_policy", &a.empty_policy);
            let reference = match &a.ref_mask {
                Some(p) => {
                    manifest.input(p)?;
                    let k = load_mask(p)?;
                    k.ensure_matches(&m)?;
                    k
                }
                None => {
                    let d = *require(&a.density, "density")?;
                    manifest.param("density", d);
                    irregular_mask(&m, d)?
                }
            };
            let summary = compute_density_summary(&reference);
            let p = darb_block_sizes(&summary, a.cap, policy)?;
            let k = darb_mask(&m, &p)?;
            plan = Some(p);
            k
        }
    };
    save_mask(&mask, out)?;

    let mut report = Report::new(&manifest);
    let retained = mask.popcount();
    report
        .set("prune.out", out.display().to_string())
        .set("prune.total", mask.len())
        .set("prune.retained", retained)
        .set("prune.density", retained as f64 / mask.len() as f64)
        .set("prune.pruning_ratio", pruning_ratio(&mask).ok());
    if let Some(plan) = &plan {
        let plan_path = a.plan_out.clone().unwrap_or_else(|| default_plan_path(out));
        std::fs::write(&plan_path, plan.to_bytes()?)?;
        report
            .set("plan.out", plan_path.display().to_string())
            .set("plan.cap", plan.cap())
            .set("plan.retained", plan.retained_count())
            .set("plan.index_bits", plan.index_bits());
        let mut sizes: Vec<Option<u32>> = plan.sizes();
        sizes.sort_unstable();
        sizes.dedup();
        for s in sizes {
            let n = plan.sizes().iter().filter(|&&x| x == s).count();
            let key = s.map_or("plan.rows_dropped".to_string(), |b| {
                format!("plan.rows_block_{b:02}")
            });
            report.set(&key, n);
        }
    }
    if let Some(p) = &a.report {
        report.write(p)?;
    }
    Ok(Outcome::ok(report))
}

fn cmd_encode(cli: &Cli, a: &EncodeArgs) -> Result<Outcome> {
    let out = require(&cli.out, "out")?;
    let format: FormatKind = a.format.parse()?;
    let m = load_matrix(&a.matrix)?;
    let k = load_mask(&a.mask)?;
    k.ensure_matches(&m)?;
    let mut manifest = RunManifest::new("encode");
    manifest.input(&a.matrix)?.input(&a.mask)?;
    manifest.param("format", format);

    let container: AnyContainer = match format {
        FormatKind::RelCsr => {
            manifest.param("gap_bits", a.gap_bits);
            rcsr_encode(&m, &k, a.gap_bits)?.into()
        }
        FormatKind::Darb => {
            let plan_path = require(&a.plan, "plan")?;
            manifest.input(plan_path)?;
            let plan = BlockSizePlan::from_bytes(&std::fs::read(plan_path)?)?;
            if darb_mask(&m, &plan)? != k {
                return Err(usage("mask is not the darb selection of this plan".into()));
            }
            darb_encode(&m, &plan)?.into()
        }
        FormatKind::Block => {
            manifest
                .param("block_rows", a.block_rows)
                .param("block_cols", a.block_cols);
            block_encode(&m, &k, a.block_rows, a.block_cols)?.into()
        }
    };
    container.save(out)?;
    let mut report = Report::new(&manifest);
    report
        .set("encode.out", out.display().to_string())
        .set("encode.bytes", std::fs::metadata(out)?.len())
        .set("encode.retained", container.retained())
        .set("encode.index_bytes", container.index_bytes());
    Ok(Outcome::ok(report))
}

fn cmd_decode(cli: &Cli, a: &DecodeArgs) -> Result<Outcome> {
    let out = require(&cli.out, "out")?;
    let c = AnyContainer::load(&a.container)?;
    let m = c.decode()?;
    save_matrix(&m, out)?;
    let mut manifest = RunManifest::new("decode");
    manifest.input(&a.container)?;
    let mut report = Report::new(&manifest);
    report
        .set("decode.format", c.kind().name())
        .set("decode.out", out.display().to_string())
        .set("decode.rows", m.rows())
        .set("decode.cols", m.cols());
    Ok(Outcome::ok(report))
}

fn cmd_report(a: &ReportArgs) -> Result<Outcome> {
    let metrics = parse_metrics(&a.metrics)?;
    let mut manifest = RunManifest::new("report");
    manifest
        .param("metrics", &a.metrics)
        .param("bins", a.bins)
        .param("block", a.block)
        .param("weight_bits", a.weight_bits);
    let needs_mask = metrics.iter().any(|m| *m != Metric::Storage);
    let mask = match (&a.mask, needs_mask) {
        (Some(p), _) => {
            manifest.input(p)?;
            Some(load_mask(p)?)
        }
        (None, true) => return Err(usage("missing required flag --mask".into())),
        (None, false) => None,
    };
    let matrix = match &a.matrix {
        Some(p) => {
            manifest.input(p)?;
            Some(load_matrix(p)?)
        }
        None => None,
    };
    let ref_mask = match &a.ref_mask {
        Some(p) => {
            manifest.input(p)?;
            Some(load_mask(p)?)
        }
        None => None,
    };
    let container = match &a.container {
        Some(p) => {
            manifest.input(p)?;
            Some(AnyContainer::load(p)?)
        }
        None => None,
    };

    let mut report = Report::new(&manifest);
    for metric in metrics {
        match metric {
            Metric::Density => {
                let k = mask.as_ref().expect("mask loaded");
                report.add_histogram(&row_density_histogram(k, a.bins)?);
                report.set(
                    "density.matrix",
                    compute_density_summary(k).matrix_density(),
                );
            }
            Metric::Occupancy => {
                report.add_occupancy(&block_occupancy(
                    mask.as_ref().expect("mask loaded"),
                    a.block,
                )?);
            }
            Metric::Salience => {
                let m = require(&matrix, "matrix")?;
                let k = mask.as_ref().expect("mask loaded");
                report.add_salience(
                    "salience.empty_block",
                    &empty_block_salience(m, k, a.block)?,
                );
                if let Some(r) = &ref_mask {
                    report.add_salience("salience.retained", &retained_salience(m, r, k)?);
                }
            }
            Metric::Ratio => {
                let k = mask.as_ref().expect("mask loaded");
                report
                    .set("ratio.total", k.len())
                    .set("ratio.retained", k.popcount())
                    .set("ratio.pruning_ratio", pruning_ratio(k)?);
            }
            Metric::Storage => {
                let c = require(&container, "container")?;
                let s = storage_report(c, a.weight_bits)?;
                report.add_storage(&s);
                if c.kind() == FormatKind::Darb {
                    report.set(
                        "storage.note",
                        IndexBudgetNote::new(s.avg_index_bits_unaligned).to_string(),
                    );
                }
            }
        }
    }
    Ok(Outcome::ok(report))
}

fn cmd_simulate(a: &SimulateArgs) -> Result<Outcome> {
    let cfg = SimulationConfig::load(&a.config).map_err(|e| match e {
        Error::Io(io) => Error::Config(io.to_string()),
        other => other,
    })?;
    let rows = cfg.compare()?;
    let mut manifest = RunManifest::new("simulate");
    manifest.input(&a.config)?;
    let mut report = Report::new(&manifest);
    report.add_comparison(&rows);
    Ok(Outcome::ok(report))
}

/// Seeded standard-normal activation vector.
pub fn activation_vector(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0f32, 1.0).expect("valid normal");
    (0..len).map(|_| d.sample(&mut rng)).collect()
}

fn cmd_verify(cli: &Cli, a: &VerifyArgs) -> Result<Outcome> {
    if !(a.rtol.is_finite() && a.rtol >= 0.0) {
        return Err(usage(format!(
            "--rtol {} must be a non-negative number",
            a.rtol
        )));
    }
    let seed = cli.seed.unwrap_or(0);
    let m = load_matrix(&a.matrix)?;
    let k = load_mask(&a.mask)?;
    let c = AnyContainer::load(&a.container)?;
    let expected = apply_mask(&m, &k)?;
    if c.shape() != m.shape() {
        return Err(Error::shape(m.shape(), c.shape()));
    }

    let mut manifest = RunManifest::new("verify");
    manifest
        .input(&a.matrix)?
        .input(&a.mask)?
        .input(&a.container)?;
    manifest.param("rtol", a.rtol).param("seed", seed);
    let mut report = Report::new(&manifest);
    report.set("verify.format", c.kind().name());

    let decoded = c.decode()?;
    if let Some((r, col)) = decoded.first_divergence(&expected) {
        report
            .set("verify.roundtrip", false)
            .set("verify.first_divergence_row", r)
            .set("verify.first_divergence_col", col);
        return Ok(Outcome {
            report,
            passed: false,
            message: Some(format!(
                "decoded container differs from masked matrix at ({r}, {col}): {} vs {}",
                decoded.get(r, col),
                expected.get(r, col)
            )),
        });
    }
    report.set("verify.roundtrip", true);

    let x = activation_vector(m.cols(), seed);
    let y = c.spmv(&x)?;
    let y_ref = dense_matvec(&expected, &x)?;
    if let Some(i) = first_spmv_violation(&y, &y_ref, a.rtol) {
        report
            .set("verify.spmv", false)
            .set("verify.spmv_first_row", i);
        return Ok(Outcome {
            report,
            passed: false,
            message: Some(format!("spmv row {i}: {} vs reference {}", y[i], y_ref[i])),
        });
    }
    report.set("verify.spmv", true);
    Ok(Outcome::ok(report))
}

/// Parses `args`, runs the command, prints its report to stdout (or
/// `--out` for `report`/`simulate`), and returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{}", e.render());
            return e.exit_code() as u8;
        }
    };
    match run(&cli) {
        Ok(outcome) => {
            let json = outcome.report.to_json();
            let report_out = match &cli.command {
                Command::Report(_) | Command::Simulate(_) | Command::Verify(_) => cli.out.as_ref(),
                _ => None,
            };
            match report_out {
                Some(p) => {
                    if let Err(e) = std::fs::write(p, &json) {
                        let _ = writeln!(stderr, "error: {e}");
                        return 2;
                    }
                }
                None => {
                    let _ = write!(stdout, "{json}");
                }
            }
            if let Some(msg) = &outcome.message {
                let _ = writeln!(stderr, "{msg}");
            }
            if outcome.passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.exit_code() == 2 {
                if let Some(name) = subcommand_name(&cli.command) {
                    let mut cmd = Cli::command();
                    if let Some(sub) = cmd.find_subcommand_mut(name) {
                        let _ = writeln!(stderr, "{}", sub.render_usage());
                    }
                }
            }
            e.exit_code()
        }
    }
}

fn subcommand_name(c: &Command) -> Option<&'static str> {
    Some(match c {
        Command::Gen(_) => "gen",
        Command::Prune(_) => "prune",
        Command::Encode(_) => "encode",
        Command::Decode(_) => "decode",
        Command::Report(_) => "report",
        Command::Simulate(_) => "simulate",
        Command::Verify(_) => "verify",
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_list_parsing() {
        assert_eq!(
            parse_metrics("ratio, storage").unwrap(),
            vec![Metric::Ratio, Metric::Storage]
        );
        assert!(parse_metrics("").is_err());
        assert!(parse_metrics(" , ").is_err());
        assert!(parse_metrics("ratio,perplexity").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn activations_are_seeded() {
        assert_eq!(activation_vector(8, 3), activation_vector(8, 3));
        assert_ne!(activation_vector(8, 3), activation_vector(8, 4));
    }
}
