use clap::Parser;

use dacl_cli::args::{Cli, Command};
use dacl_cli::{commands, selftest, CliError, CliResult, EXIT_OK};

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => {
            let m = commands::gen_data(&a)?;
            println!(
                "{}: {} labeled, {} unlabeled, {} test",
                a.out.display(),
                m.split.labeled.len(),
                m.split.unlabeled.len(),
                m.split.test.len()
            );
        }
        Command::Train(a) => {
            let report = commands::train(&a)?;
            println!("{}", commands::json_pretty(&report)?);
        }
        Command::Eval(a) => {
            let report = commands::eval(&a)?;
            println!("{}", commands::json_pretty(&report)?);
        }
        Command::DumpEmbeddings(a) => {
            let (path, report) = commands::dump_embeddings(&a)?;
            eprintln!("wrote {}", path.display());
            println!("{}", commands::json_pretty(&report)?);
        }
        Command::Selftest => {
            let outcomes = selftest::run_all();
            for o in &outcomes {
                match &o.failure {
                    None => println!("PASS {}/{}", o.module, o.id),
                    Some(why) => println!("FAIL {}/{}: {why}", o.module, o.id),
                }
            }
            let failed = outcomes.iter().filter(|o| !o.passed()).count();
            if failed > 0 {
                return Err(CliError::Selftest { failed });
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let threads = dacl::parallel::init_thread_pool_from_env();
    log::debug!("using {threads} worker thread(s)");
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
