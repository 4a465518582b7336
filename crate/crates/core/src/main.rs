fn main() {
    std::process::exit(m3dnca::cli::run(std::env::args_os()));
}
