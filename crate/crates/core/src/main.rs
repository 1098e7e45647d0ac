fn main() {
    std::process::exit(strmatch::cli::main_with(std::env::args_os()));
}
