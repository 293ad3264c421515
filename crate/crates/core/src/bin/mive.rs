fn main() {
    mive::cli::main()
}
