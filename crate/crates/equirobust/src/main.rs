fn main() {
    std::process::exit(equirobust::cli::run(std::env::args_os()));
}
