fn main() {
    std::process::exit(defocus::cli::run(std::env::args_os()));
}
