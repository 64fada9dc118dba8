fn main() {
    std::process::exit(dpdfd::cli::main());
}
