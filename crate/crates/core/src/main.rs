fn main() {
    std::process::exit(tfx::cli::run(std::env::args_os()));
}
