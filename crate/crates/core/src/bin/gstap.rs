fn main() {
    std::process::exit(gstap::cli::main_with(std::env::args_os()));
}
