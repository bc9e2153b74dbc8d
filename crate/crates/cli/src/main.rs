fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(anchorlab_cli::LOG_ENV, "warn")).init();
    std::process::exit(anchorlab_cli::run_with_args(std::env::args_os()));
}
