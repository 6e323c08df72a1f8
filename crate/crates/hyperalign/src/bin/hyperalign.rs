fn main() {
    std::process::exit(hyperalign::cli::run(std::env::args_os()));
}
