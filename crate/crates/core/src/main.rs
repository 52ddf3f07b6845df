fn main() {
    std::process::exit(corridor_lfd::cli::run());
}
