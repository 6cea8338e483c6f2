fn main() {
    std::process::exit(moviemat::cli::run(std::env::args_os()));
}
