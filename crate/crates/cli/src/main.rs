fn main() -> std::process::ExitCode {
    lpa_cusum_cli::main_entry()
}
