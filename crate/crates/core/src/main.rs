fn main() -> std::process::ExitCode {
    locogan::cli::main_entry()
}
