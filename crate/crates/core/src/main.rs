fn main() {
    std::process::exit(embproto::cli::main_with_args(std::env::args_os()));
}
