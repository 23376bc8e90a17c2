fn main() {
    std::process::exit(scenafuse::cli::dispatch(std::env::args_os()));
}
