fn main() {
    std::process::exit(segtrans::cli::run(std::env::args_os()));
}
