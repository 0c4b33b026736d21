use crossover_pgee::{cli, par};

fn main() {
    if let Some(n) = std::env::var("PGEE_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        par::init_threads(n);
    }
    std::process::exit(cli::run(std::env::args_os()));
}
