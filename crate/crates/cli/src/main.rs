fn main() {
    std::process::exit(uno_cli::main_with(std::env::args_os()));
}
