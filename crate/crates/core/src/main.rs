fn main() {
    std::process::exit(bsn_core::cli::run(std::env::args_os()));
}
