fn main() {
    std::process::exit(skd_harness::cli::run(std::env::args_os()));
}
