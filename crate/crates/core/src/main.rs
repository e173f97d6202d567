fn main() {
    std::process::exit(dpmc::cli::run(std::env::args_os()));
}
