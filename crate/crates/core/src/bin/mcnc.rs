fn main() {
    std::process::exit(mcnc::cli::cli(std::env::args_os()));
}
