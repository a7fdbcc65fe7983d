fn main() {
    std::process::exit(relflow::cli::run(std::env::args_os()));
}
