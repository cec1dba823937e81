fn main() {
    std::process::exit(longicausal::cli::run(std::env::args_os()));
}
