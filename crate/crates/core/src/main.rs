fn main() {
    std::process::exit(mmseg::cli::main(std::env::args_os()));
}
