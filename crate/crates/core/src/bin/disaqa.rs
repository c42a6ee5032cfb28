fn main() {
    std::process::exit(disaqa::cli::run(std::env::args_os()));
}
