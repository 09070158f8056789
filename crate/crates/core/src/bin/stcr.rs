fn main() {
    std::process::exit(stcr::cli::run(std::env::args_os()));
}
