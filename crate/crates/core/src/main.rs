fn main() -> std::process::ExitCode {
    symmpo::cli::main_entry()
}
