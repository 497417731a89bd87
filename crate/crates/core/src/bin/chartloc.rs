fn main() {
    std::process::exit(chartloc::cli::run(std::env::args().skip(1)));
}
