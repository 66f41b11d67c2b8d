fn main() {
    std::process::exit(journey::cli::run(std::env::args()));
}
