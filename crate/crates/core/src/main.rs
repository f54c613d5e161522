fn main() {
    std::process::exit(distill_lab::harness::cli_main(std::env::args_os()));
}
