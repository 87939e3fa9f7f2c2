fn main() {
    std::process::exit(persllm::cli::main_with_args(std::env::args_os()));
}
