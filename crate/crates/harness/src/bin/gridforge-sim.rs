use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gridforge_harness::{assert_trace, check_all, run_scenario, Cluster, Property, Scenario, Trace};

/// Runs gridforge scenarios on a simulated cluster and checks traces.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Spawn the scenario's cluster, run it, and check every property.
    Run {
        scenario: PathBuf,
        /// Write the trace here as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Path of the gridforge-workload binary.
        #[arg(long)]
        workload_bin: Option<PathBuf>,
        /// Overrides the cluster seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check properties over a dumped trace.
    Check {
        trace: PathBuf,
        /// Property names; all of them when omitted.
        #[arg(long = "property")]
        properties: Vec<String>,
    },
    /// List property names.
    Properties,
}

fn report(trace: &Trace, names: &[String]) -> bool {
    let names: Vec<String> = if names.is_empty() {
        Property::ALL.iter().map(|p| p.name().to_string()).collect()
    } else {
        names.to_vec()
    };
    let mut ok = true;
    for name in names {
        match assert_trace(trace, &name) {
            Ok(()) => println!("ok    {name}"),
            Err(e) => {
                ok = false;
                println!("FAIL  {e}");
            }
        }
    }
    ok
}

#[tokio::main]
async fn main() -> anyhow::Result<ExitCode> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match Args::parse().cmd {
        Cmd::Properties => {
            for p in Property::ALL {
                println!("{p}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Check { trace, properties } => {
            let t = Trace::read_jsonl(BufReader::new(File::open(&trace)?))?;
            Ok(if report(&t, &properties) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Run {
            scenario,
            trace,
            workload_bin,
            seed,
        } => {
            let script = Scenario::load(&scenario)?;
            let mut spec = script.cluster.to_spec();
            spec.workload_bin = workload_bin;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let mut cluster = Cluster::spawn(spec).await?;
            let result = run_scenario(&mut cluster, &script).await;
            let full = cluster.trace();
            cluster.shutdown().await;
            if let Some(path) = &trace {
                full.write_jsonl(File::create(path)?)?;
            }
            let outcome = match result {
                Ok(o) => o,
                Err(e) => {
                    eprintln!("{}: {e}", script.name);
                    return Ok(ExitCode::FAILURE);
                }
            };
            println!(
                "{}: {} requests, {} events, {:.2}s",
                script.name,
                outcome.requests.len(),
                outcome.trace.len(),
                outcome.elapsed.as_secs_f64()
            );
            for (id, status) in outcome.trace.request_outcomes() {
                println!("request {id}: {status:?}");
            }
            let ok = report(&full, &[]);
            Ok(if ok && check_all(&full).is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
