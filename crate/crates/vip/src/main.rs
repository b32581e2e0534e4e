fn main() {
    std::process::exit(vip::cli::run(std::env::args_os()));
}
