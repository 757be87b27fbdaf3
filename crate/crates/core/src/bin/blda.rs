fn main() {
    let status = blda::cli_io::dispatch(
        std::env::args_os(),
        std::env::vars().collect::<Vec<_>>(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    std::process::exit(status);
}
