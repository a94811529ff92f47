fn main() {
    std::process::exit(twoscale_ocp::cli::main_with_args(std::env::args_os()));
}
