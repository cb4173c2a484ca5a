fn main() {
    std::process::exit(streamda::cli::run(std::env::args_os()));
}
