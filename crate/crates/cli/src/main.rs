use dtm_cli::{dispatch, is_usage_error, parse, Cli, USAGE};

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli: Cli = match parse(&args) {
        Ok(cli) => cli,
        Err(msg) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            return 2;
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return 1;
        }
    }
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) if is_usage_error(&e) => {
            eprintln!("error: {e}\n\n{USAGE}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
