fn main() {
    std::process::exit(modality_tta::cli::main_with_args(std::env::args_os()));
}
