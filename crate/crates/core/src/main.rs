fn main() {
    std::process::exit(lnl::cli::main_with(std::env::args_os()));
}
