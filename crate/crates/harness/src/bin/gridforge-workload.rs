//! Synthetic user code: `gridforge-workload <job.toml> [header flags...]`.

use std::io::Write;

use gridforge_core::parse_header_args;
use gridforge_harness::workload::{run, Env, Job};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(job_path) = args.first() else {
        eprintln!("usage: gridforge-workload <job.toml> [header flags...]");
        std::process::exit(2);
    };
    let job = match std::fs::read_to_string(job_path).map_err(|e| e.to_string()).and_then(|t| Job::from_toml(&t)) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("{job_path}: {e}");
            std::process::exit(2);
        }
    };
    let header = match parse_header_args(&args[1..]) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    };
    let mut out = std::io::stdout().lock();
    let code = run(&job, &header, &Env::from_process(), &mut out);
    let _ = out.flush();
    std::process::exit(code);
}
