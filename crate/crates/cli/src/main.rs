fn main() -> std::process::ExitCode {
    fewshot_cli::main_with(std::env::args_os())
}
