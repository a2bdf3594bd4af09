fn main() {
    std::process::exit(insider_boost::cli::run(std::env::args_os()));
}
