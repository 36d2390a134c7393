fn main() {
    let code = syncflow_cli::cli_main(std::env::args_os());
    std::process::exit(code);
}
