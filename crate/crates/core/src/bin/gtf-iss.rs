fn main() {
    std::process::exit(gtf_iss::cli::main_with_args(std::env::args_os()));
}
