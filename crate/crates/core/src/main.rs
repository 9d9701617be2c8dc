fn main() {
    std::process::exit(semcert::cli::run(std::env::args_os()));
}
