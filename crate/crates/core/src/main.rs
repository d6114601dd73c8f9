fn main() {
    std::process::exit(sparsebody::cli::run());
}
