fn main() {
    std::process::exit(tedepth_cli::run(std::env::args_os()));
}
