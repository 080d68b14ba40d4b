fn main() {
    std::process::exit(nsdde::cli::main_with_args(std::env::args_os()));
}
