fn main() {
    std::process::exit(crossgls::cli::run(std::env::args_os()));
}
