fn main() {
    if let Err(e) = handeye::cli::run_from(std::env::args_os()) {
        eprintln!("{}", e.report());
        std::process::exit(e.exit_code());
    }
}
