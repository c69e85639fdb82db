fn main() {
    std::process::exit(lindstedt::cli::run(std::env::args_os()));
}
