//! Command-line front end: run scenarios, sweep policy grids, re-aggregate
//! saved traces, and emit plot data files.
//!
//! Configuration problems (missing files, bad TOML, bad flag values) exit
//! with status 2 and a message naming the offending input; simulation output
//! goes under `--out` as flat files (`trace.jsonl`, `report.csv`,
//! `compare.csv`, `plots/*.dat`). Set `TOKENCAKE_SIM_LOG=info` (or `debug`)
//! for progress on standard error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tokencake_sim::metrics::{
    self, compare_csv_row, report_csv_row, MetricsReport, COMPARE_CSV_HEADER, REPORT_CSV_HEADER,
};
use tokencake_sim::scenario::{Policy, Scenario, ScenarioError};
use tokencake_sim::trace::{self, TraceEvent};
use tokencake_sim::workload::{Workload, WorkloadError};
use tokencake_sim::SimEngine;

#[derive(Parser)]
#[command(
    name = "tokencake",
    about = "Deterministic simulator for KV-cache-centric agentic LLM serving",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario under one policy and write its trace and report.
    Run(RunArgs),
    /// Run a (policy x qps x seed) grid in parallel and compare policies.
    Sweep(SweepArgs),
    /// Aggregate an existing trace file into a report without re-running.
    Report(ReportArgs),
    /// Emit line-chart data files and a gnuplot script from prior output.
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "tokencake")]
    policy: Policy,
    /// Override the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario's arrival rate.
    #[arg(long)]
    qps: Option<f64>,
    /// Output directory (created if absent).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct SweepArgs {
    /// Scenario TOML file; qps and seed fields are overridden per cell.
    #[arg(long)]
    scenario: PathBuf,
    /// Policies to run.
    #[arg(long, value_delimiter = ',', default_values = ["tokencake", "retain", "evict"])]
    policies: Vec<Policy>,
    /// Arrival-rate grid.
    #[arg(long, value_delimiter = ',', default_values = ["0.05", "0.25", "0.5", "1.0"])]
    qps: Vec<f64>,
    /// Seeds to average over.
    #[arg(long, value_delimiter = ',', default_values = ["1", "2", "3", "4", "5"])]
    seeds: Vec<u64>,
    /// Policy the comparison table is relative to.
    #[arg(long, default_value = "retain")]
    baseline: Policy,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value = "0")]
    threads: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Trace file (JSON lines) produced by `run`.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
struct PlotArgs {
    /// Directory holding `report.csv` (and optionally `trace.jsonl`);
    /// plot files go to a `plots/` subdirectory inside it.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("TOKENCAKE_SIM_LOG", "error"),
    )
    .format_timestamp(None)
    .init();

    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => cmd_report(args),
        Command::Plot(args) => cmd_plot(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

/// Bad input (missing or invalid files, impossible parameters) exits 2;
/// anything else is an internal failure and exits 1.
fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        c.is::<ScenarioError>()
            || c.is::<WorkloadError>()
            || c.is::<serde_json::Error>()
            || c.is::<std::io::Error>()
    })
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    Ok(Scenario::from_path(path)?)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(qps) = args.qps {
        scenario.qps = qps;
        scenario.validate().map_err(anyhow::Error::from)?;
    }
    let qps = scenario.qps;
    let seed = scenario.seed;
    log::info!("running {} policy={} seed={}", args.scenario.display(), args.policy, seed);

    let workload = Workload::new(scenario)?;
    let mut engine = SimEngine::new(workload, args.policy);
    let out = engine.run();
    let report = metrics::aggregate(&out.trace);

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create output directory {}", args.out.display()))?;
    write_out(&args.out.join("trace.jsonl"), &trace::to_jsonl(&out.trace))?;
    match args.format {
        Format::Csv => {
            let mut text = String::from(REPORT_CSV_HEADER);
            text.push('\n');
            text.push_str(&report_csv_row(args.policy, qps, seed, &report));
            text.push('\n');
            write_out(&args.out.join("report.csv"), &text)?;
        }
        Format::Jsonl => {
            let mut text = serde_json::to_string(&report)?;
            text.push('\n');
            write_out(&args.out.join("report.jsonl"), &text)?;
        }
    }
    print_report_summary(args.policy, qps, seed, &report);
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let scenario = load_scenario(&args.scenario)?;
    if args.policies.is_empty() || args.qps.is_empty() || args.seeds.is_empty() {
        bail!("sweep needs at least one policy, one qps value, and one seed");
    }
    let baseline = if args.policies.contains(&args.baseline) {
        args.baseline
    } else {
        log::warn!(
            "baseline {} not in --policies; comparing against {}",
            args.baseline,
            args.policies[0]
        );
        args.policies[0]
    };

    let run = || metrics::sweep(&scenario, &args.policies, &args.qps, &args.seeds);
    let rows = if args.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.threads)
            .build()
            .context("cannot build worker pool")?
            .install(run)?
    } else {
        run()?
    };
    for row in &rows {
        log::info!(
            "policy={} qps={} seed={}: avg_e2e={:.0}ms apps={}",
            row.policy,
            row.qps,
            row.seed,
            row.report.avg_e2e_ms,
            row.report.app_count
        );
    }

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create output directory {}", args.out.display()))?;
    let mut report_text = String::from(REPORT_CSV_HEADER);
    report_text.push('\n');
    for row in &rows {
        report_text.push_str(&report_csv_row(row.policy, row.qps, row.seed, &row.report));
        report_text.push('\n');
    }
    write_out(&args.out.join("report.csv"), &report_text)?;

    let table = metrics::compare(&rows, baseline);
    let mut compare_text = String::from(COMPARE_CSV_HEADER);
    compare_text.push('\n');
    for row in &table {
        compare_text.push_str(&compare_csv_row(row));
        compare_text.push('\n');
    }
    write_out(&args.out.join("compare.csv"), &compare_text)?;

    println!(
        "{:>6}  {:<10} {:>6} {:>14} {:>10} {:>9} {:>10}",
        "qps", "policy", "runs", "avg_e2e_ms", "vs base", "eff_util", "truncated"
    );
    for c in &table {
        println!(
            "{:>6}  {:<10} {:>6} {:>14.1} {:>+9.1}% {:>9.3} {:>10}",
            c.qps,
            c.policy.name(),
            c.runs,
            c.mean_avg_e2e_ms,
            c.delta_pct_vs_baseline,
            c.mean_effective_frac,
            if c.any_truncated { "yes" } else { "" }
        );
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.trace)
        .with_context(|| format!("cannot read trace file {}", args.trace.display()))?;
    let events: Vec<TraceEvent> = trace::from_jsonl(&text)
        .with_context(|| format!("malformed trace in {}", args.trace.display()))?;
    let report = metrics::aggregate(&events);

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create output directory {}", args.out.display()))?;
    match args.format {
        Format::Csv => write_out(&args.out.join("report.csv"), &metric_value_csv(&report))?,
        Format::Jsonl => {
            let mut text = serde_json::to_string(&report)?;
            text.push('\n');
            write_out(&args.out.join("report.jsonl"), &text)?;
        }
    }
    println!(
        "{} events -> apps={} requests={} avg_e2e={:.1}ms p95={:.1}ms{}",
        events.len(),
        report.app_count,
        report.request_count,
        report.avg_e2e_ms,
        report.p95_e2e_ms,
        if report.truncated { " (partial: run truncated)" } else { "" }
    );
    Ok(())
}

/// `metric,value` rows; stable order, so re-running on the same trace is
/// byte-identical.
fn metric_value_csv(r: &MetricsReport) -> String {
    let mut out = String::from("metric,value\n");
    let mut push = |k: &str, v: String| {
        let _ = writeln!(out, "{k},{v}");
    };
    push("app_count", r.app_count.to_string());
    push("request_count", r.request_count.to_string());
    push("avg_e2e_ms", format!("{:.3}", r.avg_e2e_ms));
    push("p95_e2e_ms", format!("{:.3}", r.p95_e2e_ms));
    push("avg_request_ms", format!("{:.3}", r.avg_request_ms));
    for (ty, lat) in &r.per_type {
        push(&format!("type.{ty}.count"), lat.count.to_string());
        push(&format!("type.{ty}.mean_ms"), format!("{:.3}", lat.mean_ms));
        push(&format!("type.{ty}.p95_ms"), format!("{:.3}", lat.p95_ms));
    }
    push("mean_occupied_frac", format!("{:.4}", r.mean_occupied_frac));
    push("mean_effective_frac", format!("{:.4}", r.mean_effective_frac));
    push("mean_stalled_frac", format!("{:.4}", r.mean_stalled_frac));
    push("peak_occupied_frac", format!("{:.4}", r.peak_occupied_frac));
    push("abnormal_requests", r.abnormal_requests.to_string());
    push("preemptions", r.preemptions.to_string());
    push("critical_inversions", r.critical_inversions.to_string());
    push("offloads", r.offloads.to_string());
    push("upload_stalls", r.upload_stalls.to_string());
    push("host_acquisitions", r.host_acquisitions.to_string());
    push("throughput_tokens_per_s", format!("{:.3}", r.throughput_tokens_per_s));
    push("truncated", r.truncated.to_string());
    out
}

fn print_report_summary(policy: Policy, qps: f64, seed: u64, r: &MetricsReport) {
    println!("policy={policy} qps={qps} seed={seed}");
    println!(
        "  apps={} requests={} avg_e2e={:.1}ms p95={:.1}ms throughput={:.1} tok/s",
        r.app_count, r.request_count, r.avg_e2e_ms, r.p95_e2e_ms, r.throughput_tokens_per_s
    );
    println!(
        "  util: occupied={:.3} effective={:.3} stalled={:.3} peak={:.3}",
        r.mean_occupied_frac, r.mean_effective_frac, r.mean_stalled_frac, r.peak_occupied_frac
    );
    println!(
        "  offloads={} upload_stalls={} preemptions={} inversions={} abnormal={}{}",
        r.offloads,
        r.upload_stalls,
        r.preemptions,
        r.critical_inversions,
        r.abnormal_requests,
        if r.truncated { " TRUNCATED" } else { "" }
    );
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

// ---- plot ----

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let report_path = args.out.join("report.csv");
    let trace_path = args.out.join("trace.jsonl");
    if !report_path.is_file() && !trace_path.is_file() {
        bail!(
            "nothing to plot: neither {} nor {} exists",
            report_path.display(),
            trace_path.display()
        );
    }
    let plots = args.out.join("plots");
    std::fs::create_dir_all(&plots)
        .with_context(|| format!("cannot create {}", plots.display()))?;
    let mut script = String::from(
        "# gnuplot script; run from this directory: gnuplot plot.gp\n\
         set terminal pngcairo size 900,600\nset grid\n",
    );

    if report_path.is_file() {
        let rows = read_report_csv(&report_path)?;
        let policies = plot_latency_vs_qps(&plots, &rows)?;
        script.push_str("\nset output 'latency_vs_qps.png'\n");
        script.push_str("set xlabel 'arrival rate (apps/s)'\n");
        script.push_str("set ylabel 'mean end-to-end latency (ms)'\n");
        let series: Vec<String> = policies
            .iter()
            .enumerate()
            .map(|(i, p)| {
                format!("'latency_vs_qps.dat' using 1:{} with linespoints title '{p}'", i + 2)
            })
            .collect();
        let _ = writeln!(script, "plot {}", series.join(", \\\n     "));

        plot_abnormal_bars(&plots, &rows)?;
        script.push_str("\nset output 'abnormal.png'\n");
        script.push_str("set style data histogram\nset style fill solid 0.8\n");
        script.push_str("set ylabel 'abnormal requests (mean over seeds, highest qps)'\n");
        script.push_str("plot 'abnormal.dat' using 2:xtic(1) title ''\n");
    }
    if trace_path.is_file() {
        plot_util_timeline(&plots, &trace_path)?;
        script.push_str("\nset output 'util_timeline.png'\n");
        script.push_str("set xlabel 'time (s)'\nset ylabel 'fraction of device blocks'\n");
        script.push_str("set yrange [0:1]\n");
        script.push_str(
            "plot 'util_timeline.dat' using 1:2 with lines title 'occupied', \\\n     \
             'util_timeline.dat' using 1:3 with lines title 'active', \\\n     \
             'util_timeline.dat' using 1:4 with lines title 'stalled'\n",
        );
    }
    write_out(&plots.join("plot.gp"), &script)?;
    println!("plot data written to {}", plots.display());
    Ok(())
}

/// Rows of a sweep `report.csv`, with columns resolved by header name.
struct ReportRows {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl ReportRows {
    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("report.csv lacks a '{name}' column"))
    }

    fn get<'a>(&self, row: &'a [String], col: usize) -> &'a str {
        row.get(col).map(String::as_str).unwrap_or("")
    }
}

fn read_report_csv(path: &Path) -> Result<ReportRows> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .context("report.csv is empty")?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok(ReportRows { header, rows })
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>().with_context(|| format!("bad {what} value {s:?} in report.csv"))
}

/// Writes `latency_vs_qps.dat` (qps, one mean-latency column per policy)
/// and returns the policy column order.
fn plot_latency_vs_qps(plots: &Path, rows: &ReportRows) -> Result<Vec<String>> {
    let (pol, qps, avg) =
        (rows.col("policy")?, rows.col("qps")?, rows.col("avg_e2e_ms")?);
    let mut policies: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
    let mut qps_values: Vec<f64> = Vec::new();
    for row in &rows.rows {
        let policy = rows.get(row, pol).to_string();
        if !policies.contains(&policy) {
            policies.push(policy.clone());
        }
        let q = parse_f64(rows.get(row, qps), "qps")?;
        if !qps_values.contains(&q) {
            qps_values.push(q);
        }
        cells
            .entry((q.to_bits(), policy))
            .or_default()
            .push(parse_f64(rows.get(row, avg), "avg_e2e_ms")?);
    }
    qps_values.sort_by(f64::total_cmp);

    let mut dat = format!("# qps {}\n", policies.join(" "));
    for q in qps_values {
        let _ = write!(dat, "{q}");
        for p in &policies {
            let v = cells
                .get(&(q.to_bits(), p.clone()))
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                .unwrap_or(f64::NAN);
            let _ = write!(dat, " {v:.3}");
        }
        dat.push('\n');
    }
    write_out(&plots.join("latency_vs_qps.dat"), &dat)?;
    Ok(policies)
}

/// Writes `abnormal.dat`: per policy, the mean abnormal-request count at the
/// highest arrival rate in the report.
fn plot_abnormal_bars(plots: &Path, rows: &ReportRows) -> Result<()> {
    let (pol, qps, abn) =
        (rows.col("policy")?, rows.col("qps")?, rows.col("abnormal_requests")?);
    let mut max_qps = f64::NEG_INFINITY;
    for row in &rows.rows {
        max_qps = max_qps.max(parse_f64(rows.get(row, qps), "qps")?);
    }
    let mut per_policy: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in &rows.rows {
        if parse_f64(rows.get(row, qps), "qps")?.to_bits() == max_qps.to_bits() {
            per_policy
                .entry(rows.get(row, pol).to_string())
                .or_default()
                .push(parse_f64(rows.get(row, abn), "abnormal_requests")?);
        }
    }
    let mut dat = String::from("# policy abnormal_requests\n");
    for (policy, vals) in &per_policy {
        let _ = writeln!(dat, "{policy} {:.2}", vals.iter().sum::<f64>() / vals.len() as f64);
    }
    write_out(&plots.join("abnormal.dat"), &dat)
}

/// Writes `util_timeline.dat` (t_s, occupied, active, stalled) from a trace.
fn plot_util_timeline(plots: &Path, trace_path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(trace_path)
        .with_context(|| format!("cannot read {}", trace_path.display()))?;
    let events = trace::from_jsonl(&text)
        .with_context(|| format!("malformed trace in {}", trace_path.display()))?;
    let mut dat = String::from("# t_s occupied active stalled\n");
    for p in metrics::util_timeline(&events) {
        let _ = writeln!(
            dat,
            "{:.3} {:.4} {:.4} {:.4}",
            p.t_ms / 1000.0,
            p.occupied_frac,
            p.active_frac,
            p.stalled_frac
        );
    }
    write_out(&plots.join("util_timeline.dat"), &dat)
}
