fn main() {
    std::process::exit(img2graph::cli::run());
}
