fn main() {
    std::process::exit(zofo::cli::main());
}
