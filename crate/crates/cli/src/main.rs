fn main() {
    std::process::exit(slt_cli::run(std::env::args_os()));
}
