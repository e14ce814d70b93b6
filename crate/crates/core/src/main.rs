fn main() {
    std::process::exit(pustage_core::cli::run(std::env::args_os()));
}
