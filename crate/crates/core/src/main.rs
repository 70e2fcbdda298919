fn main() -> std::process::ExitCode {
    nerkit::cli::main()
}
