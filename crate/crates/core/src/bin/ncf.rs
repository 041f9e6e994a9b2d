fn main() -> std::process::ExitCode {
    ncf_core::cli::main()
}
