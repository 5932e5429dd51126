fn main() {
    std::process::exit(dep_core::cli::main_with(std::env::args_os()));
}
