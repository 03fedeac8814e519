fn main() {
    std::process::exit(actgen_cli::cli_main(std::env::args_os()));
}
