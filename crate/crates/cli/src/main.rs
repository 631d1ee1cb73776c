fn main() {
    std::process::exit(perflow_cli::run(std::env::args_os()));
}
