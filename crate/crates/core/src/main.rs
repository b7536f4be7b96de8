fn main() {
    std::process::exit(a3sn::cli::run(std::env::args_os()));
}
