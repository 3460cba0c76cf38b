fn main() {
    std::process::exit(aotmem::cli::main_from_env());
}
