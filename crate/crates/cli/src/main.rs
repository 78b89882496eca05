fn main() {
    std::process::exit(driftbench::main_with(std::env::args_os()));
}
