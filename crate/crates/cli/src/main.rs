fn main() {
    std::process::exit(mcat_cli::run(std::env::args_os()));
}
