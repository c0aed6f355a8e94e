fn main() {
    std::process::exit(facegraph_cli::main_with_args(std::env::args_os()));
}
