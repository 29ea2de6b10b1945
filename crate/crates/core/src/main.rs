fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HMLSTM_LOG", "info")).init();
    std::process::exit(hmlstm::cli::main_with_args(std::env::args_os()));
}
