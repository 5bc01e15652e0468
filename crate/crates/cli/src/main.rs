fn main() {
    std::process::exit(syncfed_cli::cli_main(std::env::args_os()));
}
