fn main() {
    std::process::exit(hiermob::cli::run(std::env::args_os()));
}
