fn main() {
    std::process::exit(bayesrake_cli::main_with_args(std::env::args_os()));
}
