fn main() {
    std::process::exit(esrr::cli::run(std::env::args_os()));
}
