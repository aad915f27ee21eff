fn main() {
    std::process::exit(cpt_smp::cli::main());
}
