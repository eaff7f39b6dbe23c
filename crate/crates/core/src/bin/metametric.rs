fn main() -> std::process::ExitCode {
    metametric::cli::main()
}
