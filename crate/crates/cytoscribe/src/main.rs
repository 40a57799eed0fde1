fn main() {
    std::process::exit(cytoscribe::cli::run());
}
