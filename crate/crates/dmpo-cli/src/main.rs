fn main() {
    // placeholder while the core library lands; replaced by the real CLI
    eprintln!("dmpo cli: not yet wired");
    std::process::exit(1);
}
