fn main() {
    std::process::exit(mmkd::cli::main());
}
