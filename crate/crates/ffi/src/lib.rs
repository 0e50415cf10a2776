// placeholder; real API lands with the core crate
