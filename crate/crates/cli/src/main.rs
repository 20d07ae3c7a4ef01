fn main() {
    std::process::exit(datelab::cli::dispatch(std::env::args_os()));
}
