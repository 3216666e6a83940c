fn main() {
    std::process::exit(gdnls::cli::run(std::env::args_os()));
}
