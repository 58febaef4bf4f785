fn main() {
    std::process::exit(crossre::run_from(std::env::args_os()));
}
