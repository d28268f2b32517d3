fn main() {
    std::process::exit(geoshift_cli::run(std::env::args_os()));
}
