fn main() {
    std::process::exit(its_audit::cli::run(std::env::args_os()));
}
