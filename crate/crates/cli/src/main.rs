fn main() {
    std::process::exit(gridcast_cli::run(std::env::args_os()));
}
