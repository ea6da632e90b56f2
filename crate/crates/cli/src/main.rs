use clap::Parser;
use drstrat_cli::{log_level, run, Cli};

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(log_level(&cli)).parse_default_env().init();
    match run(&cli) {
        Ok(dir) => println!("wrote {}", dir.display()),
        Err(e) => {
            eprintln!("drstrat: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
