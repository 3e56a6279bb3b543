fn main() -> std::process::ExitCode {
    smoothloss::cli::run(std::env::args_os())
}
