fn main() {
    std::process::exit(cycle_align::cli::run(std::env::args_os()));
}
