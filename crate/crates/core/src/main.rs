fn main() {
    std::process::exit(freqmoe::cli::run(std::env::args_os()));
}
