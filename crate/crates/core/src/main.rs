fn main() {
    std::process::exit(gapped_st::cli::run(std::env::args_os()));
}
