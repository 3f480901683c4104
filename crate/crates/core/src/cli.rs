//! Command-line front end. `execute` runs a parsed command against explicit
//! output streams and returns the process exit code.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{self, FunnelAnalysis};
use crate::cem;
use crate::error::{Error, Result};
use crate::ingest::{self, ConfigFile, UnitFormat};
use crate::report::{self, Format, RenderOptions};
use crate::status::ThresholdProfile;
use crate::synth::{self, PopulationSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_RED: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "funnel-equity",
    version,
    about = "Group representation across conversion funnels"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Measure one population; exits 2 when any transition is Red.
    Measure(MeasureArgs),
    /// Compare a treatment arm against a control arm.
    Abtest(AbtestArgs),
    /// Generate a synthetic population and print its oracle ratios.
    Generate(GenerateArgs),
    /// Check a unit file against a config and list every violation.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Csv,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value = "text")]
    pub format: OutputFormat,
    /// Decimal places for percentages (0-4).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=4))]
    pub digits: u8,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "FUNNEL_EQUITY_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MeasureArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Unit-level CSV or JSONL (.jsonl / .ndjson).
    #[arg(long, required_unless_present = "counts", conflicts_with = "counts")]
    pub units: Option<PathBuf>,
    /// Pre-aggregated counts CSV: `layer,<focal>,<reference>`.
    #[arg(long)]
    pub counts: Option<PathBuf>,
    /// Override the color profile: strict, middle, loose or custom(g,r).
    #[arg(long)]
    pub profile: Option<ThresholdProfile>,
    /// Write per-stratum counts and weight sums as CSV.
    #[arg(long)]
    pub strata_out: Option<PathBuf>,
    #[arg(long)]
    pub no_ci: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct AbtestArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub treatment: PathBuf,
    #[arg(long)]
    pub control: PathBuf,
    /// Both arm files are pre-aggregated counts.
    #[arg(long)]
    pub counts: bool,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Population spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    /// Destination for the unit CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub units: PathBuf,
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_owned(),
        source,
    }
}

fn render_options(output: &OutputArgs) -> RenderOptions {
    RenderOptions {
        format: match output.format {
            OutputFormat::Text => Format::Text,
            OutputFormat::Csv => Format::Csv,
        },
        percent_digits: output.digits.into(),
        ..RenderOptions::default()
    }
}

fn emit(text: &str, output: &OutputArgs, out: &mut dyn Write) -> Result<()> {
    match &output.out {
        Some(path) => fs::write(path, text).map_err(io_error(path)),
        None => out
            .write_all(text.as_bytes())
            .map_err(io_error(Path::new("<stdout>"))),
    }
}

fn measure(args: &MeasureArgs, out: &mut dyn Write) -> Result<i32> {
    let mut file = ConfigFile::load(&args.config)?;
    if let Some(profile) = &args.profile {
        file.analysis.color_profile = *profile;
    }
    let seed = args.output.seed;
    let analysis: FunnelAnalysis = match (&args.units, &args.counts) {
        (Some(units), _) => {
            let units = ingest::load_units_file(units, &file.columns, &file.analysis)?;
            analysis::analyze_units(&file.analysis, &units, seed)?
        }
        (None, Some(counts)) => {
            let counts = ingest::load_counts(ingest::open(counts)?, &file.analysis)?;
            analysis::analyze_counts(&file.analysis, &counts, seed)?
        }
        (None, None) => {
            return Err(Error::InvalidArgument(
                "--units or --counts is required".into(),
            ))
        }
    };
    let mut opts = render_options(&args.output);
    opts.show_ci = !args.no_ci;
    let mut text = report::render_funnel_table(&analysis.table, &opts)?;
    if opts.format == Format::Text && !analysis.matches.is_empty() {
        text.push('\n');
        text.push_str(&report::render_balance(&analysis.table, &analysis.matches));
    }
    emit(&text, &args.output, out)?;
    if let Some(path) = &args.strata_out {
        let pairs: Vec<_> = analysis
            .matches
            .iter()
            .map(|m| (m.strata.clone(), m.weights.clone()))
            .collect();
        let file = fs::File::create(path).map_err(io_error(path))?;
        cem::write_strata_dump(io::BufWriter::new(file), &pairs, &analysis.config)?;
    }
    Ok(if analysis.table.any_red() {
        EXIT_RED
    } else {
        EXIT_OK
    })
}

fn abtest(args: &AbtestArgs, out: &mut dyn Write) -> Result<i32> {
    let file = ConfigFile::load(&args.config)?;
    let seed = args.output.seed;
    let report = if args.counts {
        let load = |p: &Path| ingest::load_counts(ingest::open(p)?, &file.analysis);
        analysis::analyze_experiment_counts(
            &file.analysis,
            &load(&args.treatment)?,
            &load(&args.control)?,
            seed,
        )?
    } else {
        let load = |p: &Path| ingest::load_units_file(p, &file.columns, &file.analysis);
        analysis::analyze_experiment(
            &file.analysis,
            &load(&args.treatment)?,
            &load(&args.control)?,
            seed,
        )?
    };
    let text = report::render_experiment_table(&report, &render_options(&args.output))?;
    emit(&text, &args.output, out)?;
    Ok(EXIT_OK)
}

fn generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<i32> {
    let mut spec = PopulationSpec::load(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let population = synth::generate(&spec)?;
    let file = fs::File::create(&args.out).map_err(io_error(&args.out))?;
    synth::write_units_csv(
        io::BufWriter::new(file),
        &spec.covariates,
        &spec.layers,
        &population.units,
    )?;
    let stdout = Path::new("<stdout>");
    writeln!(
        out,
        "wrote {} units to {}",
        population.units.len(),
        args.out.display()
    )
    .map_err(io_error(stdout))?;
    for from in 0..spec.layers.len() - 1 {
        let ratio = synth::oracle_adjusted_ratio(&spec, from)?;
        writeln!(
            out,
            "oracle adjusted survival ratio {} -> {}: {ratio:.6}",
            spec.layers[from],
            spec.layers[from + 1]
        )
        .map_err(io_error(stdout))?;
    }
    Ok(EXIT_OK)
}

fn validate(args: &ValidateArgs, out: &mut dyn Write) -> Result<i32> {
    let file = ConfigFile::load(&args.config)?;
    let scanned = ingest::scan_units(
        ingest::open(&args.units)?,
        UnitFormat::from_path(&args.units),
        &file.columns,
        &file.analysis,
    )?;
    let violations = scanned.violations(&file.analysis);
    let stdout = Path::new("<stdout>");
    for v in &violations {
        writeln!(out, "{v}").map_err(io_error(stdout))?;
    }
    if violations.is_empty() {
        writeln!(out, "ok: {} units", scanned.units.len()).map_err(io_error(stdout))?;
        Ok(EXIT_OK)
    } else {
        writeln!(out, "{} violation(s)", violations.len()).map_err(io_error(stdout))?;
        Ok(EXIT_ERROR)
    }
}

/// Runs a parsed command. Errors are written to `err` and mapped to exit code 1.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Measure(a) => measure(a, out),
        Command::Abtest(a) => abtest(a, out),
        Command::Generate(a) => generate(a, out),
        Command::Validate(a) => validate(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_ERROR
        }
    }
}
