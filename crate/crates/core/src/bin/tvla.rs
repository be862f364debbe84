fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(tactile_vla::cli::run(&args));
}
