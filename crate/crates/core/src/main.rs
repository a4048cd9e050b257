fn main() {
    std::process::exit(srnas::cli::run(std::env::args_os()));
}
