fn main() {
    std::process::exit(interleave_cli::run_cli(std::env::args()));
}
