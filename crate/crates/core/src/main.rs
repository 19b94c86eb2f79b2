fn main() {
    std::process::exit(warprnn::cli::main_with_args(std::env::args()));
}
