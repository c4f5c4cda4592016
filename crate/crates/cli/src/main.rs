fn main() {
    std::process::exit(early_exit_cli::run(std::env::args_os()));
}
