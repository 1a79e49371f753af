use std::process::exit;

fn main() {
    let args: Vec<_> = std::env::args_os().collect();
    let verbose = args.iter().filter(|a| *a == "-v" || *a == "--verbose").count();
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let res = picso::cli::run_from_args(args);
    if res.code == 0 {
        println!("{}", res.summary);
        if let Some(p) = &res.report {
            println!("report: {}", p.display());
        }
    } else {
        eprintln!("{}", res.summary);
    }
    exit(res.code);
}
