fn main() -> std::process::ExitCode {
    exfc_core::cli::main()
}
