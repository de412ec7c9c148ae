fn main() {
    std::process::exit(sficc_cli::run(std::env::args_os()));
}
