fn main() {
    std::process::exit(sal_core::cli::run(std::env::args_os()));
}
