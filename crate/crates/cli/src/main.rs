fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(lipdistill_cli::run(&args));
}
