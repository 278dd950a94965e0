fn main() {
    std::process::exit(flatmin_harness::cli::main_with(std::env::args_os()));
}
