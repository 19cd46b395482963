fn main() {
    std::process::exit(resotune::cli::run(std::env::args_os()));
}
