fn main() {
    std::process::exit(cflag::cli::run(std::env::args_os()));
}
