fn main() {
    std::process::exit(koopman::cli::run());
}
