fn main() {
    std::process::exit(gxe_reml_cli::run(std::env::args_os()));
}
