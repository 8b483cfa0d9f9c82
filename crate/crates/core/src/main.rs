fn main() {
    std::process::exit(tracc::cli::run());
}
