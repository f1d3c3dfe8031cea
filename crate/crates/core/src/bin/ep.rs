fn main() {
    std::process::exit(elliptic_process::cli::run(std::env::args_os()));
}
