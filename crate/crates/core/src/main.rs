use clap::Parser;
use matmamba::cli::{run, Cli};
use matmamba::Error;

fn main() {
    match run(Cli::parse()) {
        Ok(()) => {}
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if matches!(e, Error::Usage(_)) { 2 } else { 1 });
        }
    }
}
