fn main() {
    std::process::exit(svkit_cli::run(std::env::args_os()));
}
