fn main() {
    std::process::exit(panfore_cli::main_with(std::env::args_os()));
}
