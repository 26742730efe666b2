fn main() {
    std::process::exit(sasmac::cli::run(std::env::args_os()));
}
