fn main() {
    std::process::exit(refi_cli::run(std::env::args_os()));
}
