fn main() {
    std::process::exit(octclass_cli::run(std::env::args_os()));
}
