fn main() -> std::process::ExitCode {
    gridsync_cli::main_with(std::env::args_os())
}
