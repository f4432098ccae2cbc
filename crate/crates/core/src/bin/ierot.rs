fn main() {
    std::process::exit(ierot::cli::run(std::env::args_os()));
}
