//! The `seamstress` binary: argv parsing and process plumbing. All command
//! behavior lives in `seamstress_core::cli` so it stays testable as a
//! library; this file only maps clap values onto it and prints the results.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use seamstress_core::cli::{self, CmdOutput, Flags, Settings};

#[derive(Debug, Parser)]
#[command(
    name = "seamstress",
    version,
    about = "Translate multi-file C projects into a compiling Rust workspace",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Any value can also be set in a
/// `seamstress.toml` in the current directory; flags win over the file.
#[derive(Debug, Args, Default)]
struct CommonOpts {
    /// C project root directory
    #[arg(long, value_name = "DIR")]
    project: Option<PathBuf>,

    /// Output directory for the run (must be outside the project)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Model profile name, or replay:<dir> to replay a recorded transcript
    #[arg(long, value_name = "SPEC")]
    backend: Option<String>,

    /// Upper bound on translation unit size, in lines
    #[arg(long, value_name = "N")]
    cap: Option<usize>,

    /// Repair attempts per unit before it is abandoned
    #[arg(long = "max-repair", value_name = "N")]
    max_repair: Option<usize>,

    /// Macro names treated as defined (comma separated, repeatable)
    #[arg(long, value_name = "NAME", value_delimiter = ',')]
    define: Vec<String>,

    /// File of extra translation rules, one per line
    #[arg(long, value_name = "FILE")]
    rules: Option<PathBuf>,

    /// Output format: text or json
    #[arg(long = "report-format", value_name = "FMT")]
    report_format: Option<String>,

    /// Replace an existing output workspace
    #[arg(long)]
    force: bool,
}

impl CommonOpts {
    fn into_flags(self) -> Flags {
        Flags {
            project: self.project,
            out: self.out,
            backend: self.backend,
            cap: self.cap,
            max_repair: self.max_repair,
            define: self.define,
            rules: self.rules,
            report_format: self.report_format,
            force: self.force,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan a C project and report its files and elements
    Analyze(CommonOpts),
    /// Merge headers, rename statics, drop declarations, and reorder modules
    Preprocess(CommonOpts),
    /// Plan translation units at the effective line cap
    Segment(CommonOpts),
    /// Translate the project, repairing until the workspace compiles
    Translate(CommonOpts),
    /// Re-render the coverage report of a finished run
    Report(CommonOpts),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    std::process::exit(run(cli.command));
}

fn run(command: Command) -> i32 {
    let file = match cli::load_file_config(Path::new("seamstress.toml")) {
        Ok(f) => f,
        Err(e) => return fail(&e),
    };

    let (opts, body): (CommonOpts, fn(&Settings) -> Result<CmdOutput, cli::CliError>) =
        match command {
            Command::Analyze(o) => (o, cli::cmd_analyze),
            Command::Preprocess(o) => (o, cli::cmd_preprocess),
            Command::Segment(o) => (o, cli::cmd_segment),
            Command::Translate(o) => (o, cli::cmd_translate),
            Command::Report(o) => (o, cli::cmd_report),
        };

    let settings = match Settings::resolve(opts.into_flags(), file) {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };

    match body(&settings) {
        Ok(out) => {
            print!("{}", out.stdout);
            let _ = std::io::stdout().flush();
            out.exit
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &cli::CliError) -> i32 {
    eprintln!("error: {e}");
    e.exit
}
