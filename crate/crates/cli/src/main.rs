fn main() {
    std::process::exit(cellsearch_cli::run(std::env::args_os()));
}
