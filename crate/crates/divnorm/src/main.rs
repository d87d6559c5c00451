fn main() {
    std::process::exit(divnorm::cli::run(std::env::args_os()));
}
