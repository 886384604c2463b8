use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MVFUSE_LOG", "warn")).init();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let code = mvfuse::cli::run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock());
    let _ = std::io::stdout().flush();
    std::process::exit(code);
}
