fn main() {
    std::process::exit(nestgraph::cli::run(std::env::args_os()));
}
