fn main() {
    std::process::exit(meta_risk_lab::cli::main_from_env());
}
