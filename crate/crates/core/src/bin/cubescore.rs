fn main() {
    std::process::exit(cubescore::cli::dispatch(std::env::args_os()));
}
