fn main() {
    std::process::exit(recode::cli::run(std::env::args_os()));
}
