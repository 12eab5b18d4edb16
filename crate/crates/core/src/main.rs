fn main() {
    std::process::exit(fewshot_dml::cli::main());
}
