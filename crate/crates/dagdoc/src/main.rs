fn main() {
    std::process::exit(dagdoc::cli::main_entry(std::env::args_os()));
}
