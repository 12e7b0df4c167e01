fn main() {
    std::process::exit(nrt::cli_io::cli(std::env::args_os()));
}
