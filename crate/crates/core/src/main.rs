fn main() {
    std::process::exit(mamoe_core::cli::run(std::env::args_os()));
}
