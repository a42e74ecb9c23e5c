fn main() {
    std::process::exit(fpo_lab::cli::main_with_args(std::env::args_os()));
}
