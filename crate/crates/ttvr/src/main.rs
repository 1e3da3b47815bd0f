fn main() {
    std::process::exit(ttvr::cli::run(std::env::args_os()));
}
