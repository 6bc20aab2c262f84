fn main() {
    std::process::exit(xmatch::run(std::env::args()));
}
