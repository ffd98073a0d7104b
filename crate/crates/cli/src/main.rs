fn main() {
    std::process::exit(lane3d_cli::run(std::env::args_os()));
}
