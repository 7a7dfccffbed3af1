fn main() {
    std::process::exit(omnic_cli::dispatch(std::env::args_os()));
}
