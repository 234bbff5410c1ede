fn main() {
    std::process::exit(ufps_core::cli::cli_main(std::env::args_os()));
}
