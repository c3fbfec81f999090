fn main() {
    let argv: Vec<String> = std::env::args().collect();
    match tjepa_cli::run(&argv) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            std::process::exit(e.exit_code());
        }
    }
}
