fn main() {
    std::process::exit(guard_cli::run(std::env::args_os()));
}
