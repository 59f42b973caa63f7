fn main() {
    std::process::exit(rtn::cli::run(std::env::args_os()));
}
