fn main() {
    std::process::exit(cfmplan::cli::run(std::env::args_os()));
}
