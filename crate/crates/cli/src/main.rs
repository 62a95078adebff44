fn main() {
    std::process::exit(fairtrans_cli::app::main_with(std::env::args_os()));
}
