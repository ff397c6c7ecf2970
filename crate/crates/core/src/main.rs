fn main() -> std::process::ExitCode {
    hmm_fisher::cli::run(std::env::args_os())
}
