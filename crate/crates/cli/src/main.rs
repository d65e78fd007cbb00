mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Parser, Subcommand, ValueEnum};
use scaleq::config::{AlignChoice, Precision};
use scaleq::decoders::HeadKind;
use scaleq::equalizer::EqualizeMode;
use scaleq::ExperimentConfig;

/// Measure and correct scale disequilibrium in multi-level feature fusion.
#[derive(Debug, Parser)]
#[command(name = "scaleq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Variance of Gaussian maps before and after bilinear upsampling.
    Fig2,
    /// Gradient-variance ratio of a two-branch fusion.
    Prop1,
    /// Subject and fusion-gradient scales of every decoder head.
    Audit,
    /// Baseline and equalized SGD on synthetic scenes.
    Train,
    /// Accumulate branch statistics and fold them into the fusion weights.
    Calibrate,
    /// Run the whole property suite.
    Check,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Fig2 => "fig2",
            Command::Prop1 => "prop1",
            Command::Audit => "audit",
            Command::Train => "train",
            Command::Calibrate => "calibrate",
            Command::Check => "check",
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AlignArg {
    True,
    False,
    Both,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EqualizeArg {
    Off,
    Injected,
    Calibrated,
}

#[derive(Debug, clap::Args)]
struct Overrides {
    /// TOML run configuration; flags win over file values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads, 0 for one per core.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long, global = true, value_enum)]
    align_corners: Option<AlignArg>,
    #[arg(long, global = true, value_name = "REAL")]
    sigma_floor: Option<f64>,
    #[arg(
        long,
        global = true,
        value_parser = PossibleValuesParser::new(HeadKind::ALL.map(HeadKind::as_str))
            .map(|s| s.parse::<HeadKind>().expect("listed head")),
    )]
    head: Option<HeadKind>,
    #[arg(long, global = true, value_enum)]
    equalize: Option<EqualizeArg>,
}

impl Overrides {
    fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            c.run.seed = s;
        }
        if let Some(o) = &self.out {
            c.run.out = o.display().to_string();
        }
        if let Some(t) = self.threads {
            c.run.threads = t;
        }
        if let Some(p) = self.precision {
            c.run.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        if let Some(a) = self.align_corners {
            c.fig2.align = match a {
                AlignArg::True => AlignChoice::True,
                AlignArg::False => AlignChoice::False,
                AlignArg::Both => AlignChoice::Both,
            };
            // a head has one grid; "both" leaves it as configured
            match a {
                AlignArg::True => c.head.align_corners = true,
                AlignArg::False => c.head.align_corners = false,
                AlignArg::Both => {}
            }
        }
        if let Some(f) = self.sigma_floor {
            c.equalizer.sigma_floor = Some(f);
        }
        if let Some(h) = self.head {
            c.head.kind = h;
            c.audit.heads = vec![h];
        }
        if let Some(e) = self.equalize {
            c.equalizer.mode = match e {
                EqualizeArg::Off => EqualizeMode::Off,
                EqualizeArg::Injected => EqualizeMode::Injected,
                EqualizeArg::Calibrated => EqualizeMode::Calibrated,
            };
        }
    }
}

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let mut config = match &cli.overrides.config {
        Some(p) => match ExperimentConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {}: {e}", p.display());
                return ExitCode::from(EXIT_USAGE);
            }
        },
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut config);
    if let Err(e) = config.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    if config.run.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(config.run.threads).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match commands::run(cli.command, &config) {
        Ok(summary) => {
            for a in summary.assertions.iter().filter(|a| !a.passed) {
                eprintln!("FAIL {}: {}", a.name, a.detail);
            }
            if summary.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILED)
            }
        }
        Err(e) => {
            eprintln!("error: {} failed: {e}", cli.command.name());
            ExitCode::from(EXIT_FAILED)
        }
    }
}
