fn main() {
    std::process::exit(vesselda::run_cli(std::env::args_os()));
}
