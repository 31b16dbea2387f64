fn main() {
    std::process::exit(httpsync::cli::run());
}
