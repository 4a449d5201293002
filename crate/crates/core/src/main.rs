fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DADA_LOG", "warn")).init();
    std::process::exit(dada_core::cli::run(std::env::args_os()));
}
