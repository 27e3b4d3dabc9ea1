use clap::Parser;
use kpu::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let threads = std::env::var("KPU_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("warning: thread pool: {e}");
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
