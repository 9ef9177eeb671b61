fn main() {
    std::process::exit(afctl::cli::main_with_args(std::env::args_os()));
}
