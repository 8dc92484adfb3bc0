fn main() {
    std::process::exit(wholebody::cli::run(std::env::args_os()));
}
