fn main() {
    std::process::exit(mdpcc::cli::run(std::env::args_os()));
}
