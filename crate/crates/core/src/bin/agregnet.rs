fn main() {
    std::process::exit(agregnet::cli::dispatch(std::env::args_os()));
}
