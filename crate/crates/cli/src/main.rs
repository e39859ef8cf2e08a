fn main() {
    std::process::exit(gpemu_cli::run(std::env::args_os()));
}
