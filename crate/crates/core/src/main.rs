fn main() {
    std::process::exit(evigrpo::cli::run(std::env::args_os()));
}
