fn main() -> std::process::ExitCode {
    futuresight::cli::main()
}
