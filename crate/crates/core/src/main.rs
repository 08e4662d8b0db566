fn main() {
    std::process::exit(promptdiv::cli::run(std::env::args_os()));
}
