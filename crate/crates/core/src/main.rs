fn main() {
    let code = std::panic::catch_unwind(|| {
        aahr::cli::run(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr())
    })
    .unwrap_or(1);
    std::process::exit(code);
}
