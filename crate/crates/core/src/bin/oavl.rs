fn main() {
    std::process::exit(oa_vlm::cli::run(std::env::args_os()));
}
