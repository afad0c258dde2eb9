fn main() {
    std::process::exit(eegtok_cli::run(std::env::args_os()));
}
