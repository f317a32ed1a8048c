fn main() {
    // ndarray-linalg is used without a bundled backend; LAPACK and BLAS
    // symbols come from the system OpenBLAS shared library.
    println!("cargo:rustc-link-lib=dylib=openblas");
}
