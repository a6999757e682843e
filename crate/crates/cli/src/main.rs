fn main() {
    std::process::exit(normgrad_cli::run(std::env::args_os()));
}
