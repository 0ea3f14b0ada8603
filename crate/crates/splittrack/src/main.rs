fn main() {
    std::process::exit(splittrack::cli::run(std::env::args_os()));
}
