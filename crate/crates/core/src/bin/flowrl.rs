fn main() {
    std::process::exit(flowrl::harness::run_command(std::env::args_os()));
}
