fn main() {
    std::process::exit(fedirm::cli::main_with_args(std::env::args_os()));
}
