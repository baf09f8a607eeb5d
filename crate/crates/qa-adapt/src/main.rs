fn main() {
    env_logger::init();
    std::process::exit(qa_adapt::cli::run_cli(std::env::args_os()));
}
