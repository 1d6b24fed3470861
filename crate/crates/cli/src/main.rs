fn main() {
    std::process::exit(ttn_lab_cli::cli_main(std::env::args_os()));
}
