fn main() {
    std::process::exit(coursepath_cli::run(std::env::args_os()));
}
