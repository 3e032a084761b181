fn main() {
    std::process::exit(hdspace_cli::run(std::env::args_os()));
}
