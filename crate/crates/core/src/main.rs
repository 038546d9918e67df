fn main() {
    std::process::exit(stripesort::cli::run(std::env::args_os()));
}
