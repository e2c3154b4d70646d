fn main() {
    std::process::exit(cdformer_cli::main_with_args(std::env::args_os()));
}
