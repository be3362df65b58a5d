fn main() {
    std::process::exit(fundus_lime::cli::main());
}
