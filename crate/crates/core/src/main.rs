fn main() {
    std::process::exit(etn_core::cli::run(std::env::args_os()));
}
