fn main() { mdbm::cli::main(); }
