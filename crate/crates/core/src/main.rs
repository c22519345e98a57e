fn main() {
    std::process::exit(sdclab::cli::main_with(std::env::args_os()));
}
