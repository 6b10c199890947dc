fn main() {
    std::process::exit(fedchannel::cli::run_cli(std::env::args_os()));
}
