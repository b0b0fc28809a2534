fn main() {
    std::process::exit(sense::cli::main_exit_code());
}
