fn main() {
    std::process::exit(picorag::cli::main());
}
