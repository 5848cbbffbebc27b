fn main() {
    std::process::exit(neurosel::cli::main());
}
