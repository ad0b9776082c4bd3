fn main() {
    std::process::exit(haluprobe::cli::run(std::env::args_os()));
}
