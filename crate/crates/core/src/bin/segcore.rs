fn main() {
    std::process::exit(segcore::cli::run(std::env::args_os()));
}
