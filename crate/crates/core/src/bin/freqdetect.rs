fn main() {
    std::process::exit(freqdetect::cli::run(std::env::args_os()));
}
