fn main() {
    std::process::exit(mesic::cli_io::main_with_args(std::env::args_os()));
}
