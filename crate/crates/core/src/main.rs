fn main() {
    std::process::exit(deepten::cli::run(std::env::args_os()));
}
