fn main() {
    std::process::exit(omniseg_cli::run(std::env::args_os()));
}
