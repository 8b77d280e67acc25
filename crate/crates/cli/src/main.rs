//! maskedkrum command line: codebook generation and verification, leakage
//! analysis, one-shot aggregation over a gradient CSV, and full protocol /
//! training simulations driven by a JSON scenario.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use maskedkrum_core::codebook::{build_codebook, equivalent_sigma, verify_codebook, NoiseCodebook};
use maskedkrum_core::codec::{
    decode_distances, encode_client_gradient, max_worker_threads, worker_pairwise_distances,
    DecodeMode, WorkerId,
};
use maskedkrum_core::krum::{score_clients, select_top_k};
use maskedkrum_core::leakage::{calibrate_sigma, mi_bound};
use maskedkrum_core::model::GradientVector;
use maskedkrum_core::protocol::{RoundOutcome, RoundStatus, ScenarioConfig, Simulator};
use maskedkrum_core::trainer::{run_experiment, Aggregator, SyntheticSource, ToyTask};

#[derive(Parser)]
#[command(
    name = "maskedkrum",
    version,
    about = "Privacy-preserving Byzantine-robust gradient aggregation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a constant-distance noise codebook and write it as an NCBK file.
    GenCodebook(GenCodebookArgs),
    /// Check every pair of an NCBK file against its declared constant.
    VerifyCodebook {
        /// Path to the codebook file.
        file: PathBuf,
    },
    /// Compute the per-client information-leakage bound, or calibrate the
    /// noise scale for a leakage budget.
    Leakage(LeakageArgs),
    /// Run encode -> distance -> decode -> Multi-Krum over a gradient CSV.
    Aggregate(AggregateArgs),
    /// Run sealed aggregation rounds from a scenario config.
    Simulate(SimulateArgs),
    /// Train the toy task under attack, comparing Multi-Krum with plain
    /// averaging on identical seeds.
    Train(TrainArgs),
}

#[derive(Args)]
struct GenCodebookArgs {
    /// Number of noise vectors.
    #[arg(long)]
    n: usize,
    /// Vector dimension (must be >= n).
    #[arg(long)]
    dim: usize,
    /// Pairwise squared distance constant C.
    #[arg(long)]
    c: f64,
    /// RNG seed; reruns are byte-identical.
    #[arg(long)]
    seed: u64,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LeakageArgs {
    /// Per-coordinate noise scale sigma.
    #[arg(long, conflicts_with = "codebook")]
    sigma: Option<f64>,
    /// Derive sigma from a codebook file as sqrt(C/2d).
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Comma-separated per-coordinate gradient variances.
    #[arg(long, conflicts_with_all = ["var", "dim"])]
    variances: Option<String>,
    /// Uniform per-coordinate variance (requires --dim).
    #[arg(long, requires = "dim")]
    var: Option<f64>,
    /// Coordinate count for --var.
    #[arg(long)]
    dim: Option<usize>,
    /// Calibrate the smallest sigma with bound <= this budget (nats)
    /// instead of evaluating the bound at a given sigma.
    #[arg(long)]
    budget: Option<f64>,
}

#[derive(Args)]
struct AggregateArgs {
    /// Gradient CSV with header client_id,v0,...,v{d-1}.
    #[arg(long)]
    grads: PathBuf,
    /// Byzantine tolerance f.
    #[arg(long)]
    f: usize,
    /// Clients to select (default N-f-2).
    #[arg(long)]
    k: Option<usize>,
    /// Codebook file; must cover every client id at the CSV's dimension.
    #[arg(long)]
    codebook: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON path.
    #[arg(long)]
    config: PathBuf,
    /// JSON-lines audit log; one round outcome per line, appended.
    #[arg(long, default_value = "audit.jsonl")]
    audit: PathBuf,
    /// Per-phase timings CSV (round, phase, microseconds).
    #[arg(long, default_value = "timings.csv")]
    timings: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Scenario JSON path.
    #[arg(long)]
    config: PathBuf,
    /// Loss-curve CSV (round, aggregator, loss, byz_selected_count).
    #[arg(long, default_value = "losses.csv")]
    out: PathBuf,
    /// Optional JSON-lines audit of Multi-Krum round outcomes.
    #[arg(long)]
    audit: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenCodebook(args) => {
            let cb = build_codebook(args.n, args.dim, args.c, args.seed)?;
            cb.write_to(&args.out)
                .with_context(|| format!("writing {}", args.out.display()))?;
            println!(
                "wrote {} ({} x {}, C={}, seed={})",
                args.out.display(),
                args.n,
                args.dim,
                args.c,
                args.seed
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyCodebook { file } => {
            let cb = NoiseCodebook::read_from(&file)
                .with_context(|| format!("reading {}", file.display()))?;
            let report = verify_codebook(&cb);
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Leakage(args) => leakage_command(args),
        Command::Aggregate(args) => aggregate_command(args),
        Command::Simulate(args) => simulate_command(args),
        Command::Train(args) => train_command(args),
    }
}

fn leakage_command(args: LeakageArgs) -> Result<ExitCode> {
    let variances: Vec<f64> = if let Some(list) = &args.variances {
        list.split(',')
            .map(|s| s.trim().parse::<f64>().context("parsing --variances"))
            .collect::<Result<_>>()?
    } else if let (Some(v), Some(d)) = (args.var, args.dim) {
        vec![v; d]
    } else {
        bail!("provide either --variances or --var with --dim");
    };

    if let Some(budget) = args.budget {
        let cal = calibrate_sigma(&variances, budget)?;
        let report = mi_bound(&variances, cal.sigma)?;
        let out = serde_json::json!({
            "calibrated_sigma": cal.sigma,
            "all_variances_zero": cal.all_variances_zero,
            "budget_nats": budget,
            "report": report,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(ExitCode::SUCCESS);
    }

    let sigma = match (&args.sigma, &args.codebook) {
        (Some(s), None) => *s,
        (None, Some(path)) => {
            let cb = NoiseCodebook::read_from(path)
                .with_context(|| format!("reading {}", path.display()))?;
            equivalent_sigma(&cb)
        }
        _ => bail!("provide exactly one of --sigma or --codebook (or use --budget)"),
    };
    let report = mi_bound(&variances, sigma)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ExitCode::SUCCESS)
}

/// Parse the gradient CSV: header `client_id,v0,...,v{d-1}`, one row per
/// client, values in 64-bit round-trip decimal.
fn parse_gradients_csv(path: &PathBuf) -> Result<Vec<GradientVector>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().context("empty gradient CSV")?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"client_id") || columns.len() < 2 {
        bail!("gradient CSV header must be client_id,v0,...,v{{d-1}}");
    }
    for (i, col) in columns[1..].iter().enumerate() {
        if *col != format!("v{i}") {
            bail!("unexpected column {:?}, expected v{}", col, i);
        }
    }
    let dim = columns.len() - 1;
    let mut gradients = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            bail!(
                "row {}: expected {} fields, got {}",
                lineno + 2,
                dim + 1,
                fields.len()
            );
        }
        let client_id: u32 = fields[0]
            .parse()
            .with_context(|| format!("row {}: client_id", lineno + 2))?;
        let values: Vec<f64> = fields[1..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .with_context(|| format!("row {}", lineno + 2))
            })
            .collect::<Result<_>>()?;
        gradients.push(GradientVector::new(client_id, values)?);
    }
    if gradients.is_empty() {
        bail!("gradient CSV has no data rows");
    }
    gradients.sort_by_key(|g| g.client_id);
    for pair in gradients.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            bail!("duplicate client id {}", pair[0].client_id);
        }
    }
    if gradients[0].client_id == 0 {
        bail!("client ids start at 1");
    }
    Ok(gradients)
}

fn aggregate_command(args: AggregateArgs) -> Result<ExitCode> {
    let gradients = parse_gradients_csv(&args.grads)?;
    let cb = NoiseCodebook::read_from(&args.codebook)
        .with_context(|| format!("reading {}", args.codebook.display()))?;
    let n = gradients.len();
    let dim = gradients[0].dim();
    if cb.dim() != dim {
        bail!("codebook dim {} != gradient dim {}", cb.dim(), dim);
    }
    let max_id = gradients.last().unwrap().client_id as usize;
    if cb.n() < max_id {
        bail!(
            "codebook has {} rows, need {} for the highest client id",
            cb.n(),
            max_id
        );
    }
    let k = args.k.unwrap_or_else(|| n.saturating_sub(args.f + 2));

    let mut plus = Vec::with_capacity(n);
    let mut minus = Vec::with_capacity(n);
    for g in &gradients {
        let row = cb.row((g.client_id - 1) as usize);
        let (p, m) = encode_client_gradient(g, row)?.into_worker_shares();
        plus.push(p);
        minus.push(m);
    }
    let threads = max_worker_threads();
    let p1 = worker_pairwise_distances(WorkerId::One, &plus, threads)?;
    let p2 = worker_pairwise_distances(WorkerId::Two, &minus, threads)?;
    let decoded = decode_distances(&p1, &p2, cb.constant(), DecodeMode::Raw)?;
    let ids: Vec<u32> = gradients.iter().map(|g| g.client_id).collect();
    let table = score_clients(&decoded, &ids, args.f)?;
    let selection = select_top_k(&table, k)?;
    println!("{}", serde_json::to_string_pretty(&selection)?);
    Ok(ExitCode::SUCCESS)
}

fn read_scenario(path: &PathBuf) -> Result<ScenarioConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let scenario: ScenarioConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(scenario)
}

fn append_audit(path: &PathBuf, outcomes: &[RoundOutcome]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut out = BufWriter::new(file);
    for outcome in outcomes {
        serde_json::to_writer(&mut out, outcome)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn write_timings(path: &PathBuf, outcomes: &[RoundOutcome]) -> Result<()> {
    let mut out =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(out, "round,phase,microseconds")?;
    for outcome in outcomes {
        for t in &outcome.timings {
            writeln!(
                out,
                "{},{},{}",
                outcome.round_index,
                t.phase.name(),
                t.micros
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

fn simulate_command(args: SimulateArgs) -> Result<ExitCode> {
    let scenario = read_scenario(&args.config)?;
    let mut sim = Simulator::new(&scenario)?;
    let source = SyntheticSource {
        dim: scenario.dim,
        attack: scenario.attack.clone(),
        n_byzantine: scenario.n_byzantine,
        master_seed: scenario.seed,
    };
    let outcomes = sim.run_scenario(scenario.rounds, &source)?;
    append_audit(&args.audit, &outcomes)?;
    write_timings(&args.timings, &outcomes)?;

    let completed = outcomes
        .iter()
        .filter(|o| o.status == RoundStatus::Completed)
        .count();
    let summary = serde_json::json!({
        "rounds": outcomes.len(),
        "completed": completed,
        "audit": args.audit.display().to_string(),
        "timings": args.timings.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(if completed == outcomes.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn train_command(args: TrainArgs) -> Result<ExitCode> {
    let scenario = read_scenario(&args.config)?;
    scenario.to_system_config()?;
    let task = ToyTask::generate(
        scenario.n_clients,
        scenario.dim,
        scenario.samples_per_client,
        scenario.data_noise,
        scenario.seed,
    );
    let krum = run_experiment(&task, &scenario, Aggregator::MultiKrum)?;
    let mean = run_experiment(&task, &scenario, Aggregator::PlainMean)?;

    let mut out = BufWriter::new(
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?,
    );
    writeln!(out, "round,aggregator,loss,byz_selected_count")?;
    for record in krum.records.iter().chain(&mean.records) {
        writeln!(
            out,
            "{},{},{},{}",
            record.round,
            record.aggregator.name(),
            record.loss,
            record.byz_selected_count
        )?;
    }
    out.flush()?;

    if let Some(audit) = &args.audit {
        append_audit(audit, &krum.outcomes)?;
    }

    let byz_rounds = krum
        .records
        .iter()
        .filter(|r| r.byz_selected_count > 0)
        .count();
    let summary = serde_json::json!({
        "rounds": scenario.rounds,
        "multikrum_final_loss": krum.final_loss,
        "plain_mean_final_loss": mean.final_loss,
        "rounds_with_byzantine_selected": byz_rounds,
        "losses_csv": args.out.display().to_string(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}
