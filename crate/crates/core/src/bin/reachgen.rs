fn main() {
    std::process::exit(reachgen::cli::run(std::env::args_os()));
}
