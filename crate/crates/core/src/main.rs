fn main() {
    std::process::exit(cloudmask::harness::cli::run());
}
