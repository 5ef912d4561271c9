fn main() {
    std::process::exit(mobility_trends::cli::run(std::env::args_os()));
}
