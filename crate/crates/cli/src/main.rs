use std::process::ExitCode;

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("MTSE_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: MTSE_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    ExitCode::from(seqenc_cli::run(std::env::args_os().collect()) as u8)
}
