fn main() -> std::process::ExitCode {
    foldedit_service::cli::main_with(std::env::args_os())
}
