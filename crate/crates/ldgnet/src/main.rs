fn main() {
    std::process::exit(ldgnet::cli::run(std::env::args_os()));
}
