fn main() {
    rlw_pinn::cli::main();
}
