fn main() {
    let outcome = syntrace::cli::run(std::env::args_os());
    std::process::exit(outcome.exit_code);
}
