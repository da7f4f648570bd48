fn main() {
    std::process::exit(pointcount::cli::run(std::env::args_os()));
}
