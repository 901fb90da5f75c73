fn main() {
    std::process::exit(etlspan::cli::dispatch(std::env::args_os()));
}
