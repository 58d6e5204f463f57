fn main() {
    std::process::exit(synthvlp::cli::run(std::env::args_os()));
}
