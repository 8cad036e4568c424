fn main() {
    std::process::exit(featalign_cli::main_with_args(std::env::args_os()));
}
