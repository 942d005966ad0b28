fn main() {
    std::process::exit(lmmnet::cli::run(std::env::args_os()));
}
