fn main() {
    std::process::exit(lvcs::cli::cli_main(std::env::args_os()));
}
