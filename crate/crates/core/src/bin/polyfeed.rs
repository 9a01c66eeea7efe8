fn main() {
    std::process::exit(polyfeed::cli::run(std::env::args_os()));
}
