fn main() -> std::process::ExitCode {
    let code = wingbeat::cli::run(std::env::args_os().collect());
    std::process::ExitCode::from(code as u8)
}
