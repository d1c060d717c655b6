fn main() {
    std::process::exit(ggda::cli::main_with_args(std::env::args_os()));
}
