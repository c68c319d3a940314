use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use guard_core::auth::{verify_proof_chain, ChainFile, NonceLedger};
use guard_core::crypto::PublicParams;
use guard_harness::log::Mode;
use guard_harness::{
    collusion_mc, controller_run, load_config, read_csv_file, summarize, HarnessError, MetricsQuery, Report,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Parser)]
#[command(name = "guard", version, about = "Authenticated skip graph search: simulation and tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulated deployment and write its logs.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Verify a stored proof chain offline.
    Verify {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        params: PathBuf,
    },
    /// Aggregate a merged CSV log.
    Metrics {
        #[arg(long)]
        csv: PathBuf,
        /// latency, compute, msgsize, hops or rejects
        #[arg(long)]
        query: String,
    },
    /// Estimate the chance that all three guards of a node collude.
    Collusion {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        f: usize,
        #[arg(long)]
        trials: u64,
        #[arg(long)]
        seed: u64,
    },
}

const EXIT_REJECT: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_PHASE: u8 = 3;

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("guard: {msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config } => run(&config),
        Command::Verify { chain, params } => verify(&chain, &params),
        Command::Metrics { csv, query } => metrics(&csv, &query),
        Command::Collusion { n, f, trials, seed } => collusion(n, f, trials, seed),
    }
}

fn run(path: &Path) -> ExitCode {
    let cfg = match load_config(path) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let out = match controller_run(&cfg) {
        Ok(o) => o,
        Err(HarnessError::Phase(e)) => return fail(EXIT_PHASE, e),
        Err(HarnessError::Config(e)) => return fail(EXIT_INPUT, e),
        Err(e) => return fail(EXIT_PHASE, e),
    };
    // the summary comes from the written file, not from memory
    let records = match read_csv_file(&out.merged_csv) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_PHASE, e),
    };
    let summary = summarize(&records);
    println!("merged: {}", out.merged_csv.display());
    println!("params: {}", out.params_file.display());
    println!("mode,searches,accepted,rejected,failed,avg_latency_us,avg_msg_bytes");
    for (mode, m) in &summary.modes {
        let mean = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        let accepted = if *mode == Mode::Plain { "-".to_string() } else { m.accepts.to_string() };
        println!(
            "{mode},{},{accepted},{},{},{},{}",
            m.latency_us.count,
            m.rejects,
            m.failures,
            mean(m.latency_us.value()),
            mean(m.msg_bytes.value())
        );
    }
    ExitCode::SUCCESS
}

fn verify(chain: &Path, params: &Path) -> ExitCode {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()));
    let file = match read(chain).and_then(|t| ChainFile::from_text(&t).map_err(|e| format!("{}: {e}", chain.display())))
    {
        Ok(f) => f,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let params =
        match read(params).and_then(|t| PublicParams::from_text(&t).map_err(|e| format!("{}: {e}", params.display())))
        {
            Ok(p) => p,
            Err(e) => return fail(EXIT_INPUT, e),
        };
    let verdict =
        verify_proof_chain(&file.chain, &params, file.initiator, file.query, file.nonce, &mut NonceLedger::default());
    println!("{verdict}");
    if verdict.is_accept() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_REJECT)
    }
}

fn metrics(csv: &Path, query: &str) -> ExitCode {
    let query: MetricsQuery = match query.parse() {
        Ok(q) => q,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let records = match read_csv_file(csv) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_INPUT, format!("{}: {e}", csv.display())),
    };
    print!("{}", Report { summary: &summarize(&records), query });
    ExitCode::SUCCESS
}

fn collusion(n: usize, f: usize, trials: u64, seed: u64) -> ExitCode {
    let r = match collusion_mc(n, f, trials, &mut ChaCha20Rng::seed_from_u64(seed)) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    println!("n,f,trials,hits,estimate,exact,bound,sigma,overlay");
    println!(
        "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
        r.n,
        r.f,
        r.trials,
        r.hits,
        r.estimate,
        r.exact,
        r.bound,
        r.sigma,
        if r.full_overlay { "full" } else { "sparse" }
    );
    let hist: Vec<String> = r.distinct_guards.iter().map(|(k, v)| format!("{k}:{v}")).collect();
    println!("distinct guards per trial: {}", hist.join(" "));
    ExitCode::SUCCESS
}
