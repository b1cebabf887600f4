fn main() {
    std::process::exit(litetok::cli::run(std::env::args_os()));
}
