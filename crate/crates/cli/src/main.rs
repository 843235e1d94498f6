use std::path::PathBuf;

use analytika::aggregate::{
    apply_filter, builtin_game_categories, compute_stats, default_min_last_update, load_corpus, parse_category_list,
    render_text, write_outputs, SelectionFilter, StatsOptions, DEFAULT_MIN_DOWNLOADS, DEFAULT_TOP_N,
};
use analytika::attribution::load_known_prefixes;
use analytika::corpus::{read_corpus_csv, CorpusEntry};
use analytika::exec::ExecMode;
use analytika::fetch::FetchConfig;
use analytika::patterns::PatternBundle;
use analytika::pipeline::{run_corpus, AnalysisConfig, Analyzer, DEFAULT_TIMEOUT_SECONDS};
use anyhow::{bail, Context, Result};
use chrono::NaiveDate;
use clap::{ArgAction, Args, Parser, Subcommand};

/// Detects TEE-backed Android API usage and crypto libraries in APK files.
#[derive(Parser)]
#[command(name = "analytika", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze one APK or a corpus and write one JSON report per app.
    Analyze(AnalyzeArgs),
    /// Compute corpus statistics from a report directory.
    Stats(StatsArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    /// APK file to analyze.
    #[arg(required_unless_present = "corpus", conflicts_with = "corpus")]
    apk: Option<PathBuf>,
    /// Corpus CSV (sha256,package_name,category,downloads,last_update,path_or_remote).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Pattern directory; the builtin patterns are used when omitted.
    #[arg(long)]
    patterns: Option<PathBuf>,
    /// Known library prefixes, one per line.
    #[arg(long)]
    known_prefixes: Option<PathBuf>,
    #[arg(long, default_value = "reports")]
    out: PathBuf,
    /// Per-app deadline in seconds.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_SECONDS)]
    timeout: u64,
    /// Apps analyzed concurrently; defaults to the number of CPUs.
    #[arg(long)]
    workers: Option<usize>,
    /// Download endpoint for corpus rows without a local path.
    #[arg(long, requires = "api_key_env")]
    fetch_endpoint: Option<String>,
    /// Environment variable holding the download API key.
    #[arg(long, requires = "fetch_endpoint")]
    api_key_env: Option<String>,
    /// Re-analyze apps that already have an ok report.
    #[arg(long)]
    force: bool,
    /// Attribute ProGuard-shaped packages (e.g. `b.d`) to the main app.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    proguard_as_main: bool,
    /// Analyze apps one after another on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    reports: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// At least 10000 downloads, updated since 2020-01-01, no game categories.
    #[arg(long, conflicts_with_all = ["min_downloads", "min_date", "exclude_categories"])]
    filter_defaults: bool,
    #[arg(long)]
    min_downloads: Option<u64>,
    /// Earliest last update, YYYY-MM-DD.
    #[arg(long)]
    min_date: Option<NaiveDate>,
    /// File with one excluded category per line.
    #[arg(long)]
    exclude_categories: Option<PathBuf>,
    #[arg(long, default_value = "stats")]
    out: PathBuf,
    /// Rows in each top-library table.
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    top: usize,
    /// Pattern directory naming the crypto libraries to tabulate.
    #[arg(long)]
    patterns: Option<PathBuf>,
    /// Known library prefixes, one per line.
    #[arg(long)]
    known_prefixes: Option<PathBuf>,
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let mut config = AnalysisConfig::new(&args.out);
    config.timeout_seconds = args.timeout;
    if let Some(w) = args.workers {
        config.worker_count = w;
    }
    config.patterns_dir = args.patterns;
    config.known_prefixes = args.known_prefixes;
    config.force = args.force;
    config.proguard_as_main = args.proguard_as_main;
    if args.sequential {
        config.exec_mode = ExecMode::Sequential;
    }
    if let (Some(endpoint), Some(var)) = (args.fetch_endpoint, args.api_key_env) {
        config.fetch = Some(FetchConfig::from_env(endpoint, &var).map_err(anyhow::Error::msg)?);
    }
    let entries = match (&args.apk, &args.corpus) {
        (Some(apk), None) => vec![CorpusEntry::local(apk)],
        (None, Some(csv)) => read_corpus_csv(csv)?,
        _ => bail!("give either an APK path or --corpus"),
    };
    let analyzer = Analyzer::from_config(config)?;
    let summary = run_corpus(&entries, &analyzer)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn stats(args: StatsArgs) -> Result<()> {
    let filter = if args.filter_defaults {
        SelectionFilter::defaults()
    } else {
        let mut f = SelectionFilter::none();
        if let Some(n) = args.min_downloads {
            f.min_downloads = n;
        }
        if let Some(d) = args.min_date {
            f.min_last_update = d;
        }
        if let Some(path) = &args.exclude_categories {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            f.excluded_categories = parse_category_list(&text);
        }
        f
    };
    log::debug!(
        "filter defaults: {DEFAULT_MIN_DOWNLOADS} downloads, {}, {} categories",
        default_min_last_update(),
        builtin_game_categories().len()
    );
    let patterns = match &args.patterns {
        Some(dir) => PatternBundle::load_dir(dir)?,
        None => PatternBundle::builtin(),
    };
    let known_prefixes = match &args.known_prefixes {
        Some(path) => load_known_prefixes(path).with_context(|| format!("reading {}", path.display()))?,
        None => patterns.known_prefixes.clone(),
    };
    let mut native_libraries: Vec<String> = Vec::new();
    for p in &patterns.native {
        if !native_libraries.contains(&p.library) {
            native_libraries.push(p.library.clone());
        }
    }
    let options = StatsOptions {
        known_prefixes,
        top_n: args.top.max(1),
        software_libraries: patterns.crypto.iter().map(|s| s.detector.clone()).collect(),
        native_libraries,
    };
    let corpus = load_corpus(&args.reports, &args.corpus)?;
    if corpus.metadata_without_report > 0 {
        log::warn!("{} corpus rows have no report", corpus.metadata_without_report);
    }
    let corpus = apply_filter(&corpus, &filter);
    let stats = compute_stats(&corpus, &options);
    write_outputs(&stats, &args.out)?;
    print!("{}", render_text(&stats));
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Analyze(args) => analyze(args),
        Command::Stats(args) => stats(args),
    }
}
