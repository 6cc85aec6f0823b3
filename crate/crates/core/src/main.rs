fn main() {
    std::process::exit(tpdiff::workbench::cli::run(std::env::args_os()));
}
