fn main() {
    std::process::exit(dohfl::cli::main_with_args(std::env::args_os()));
}
