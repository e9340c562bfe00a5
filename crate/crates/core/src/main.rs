fn main() {
    std::process::exit(quantstat::cli::run(std::env::args_os()));
}
