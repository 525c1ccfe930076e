fn main() {
    std::process::exit(dtr_cli::run(std::env::args_os()));
}
