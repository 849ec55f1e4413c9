fn main() {
    std::process::exit(cml::cli::run(std::env::args().skip(1)));
}
