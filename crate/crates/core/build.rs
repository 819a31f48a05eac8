fn main() {
    if std::env::var("CARGO_FEATURE_SYSTEM_BLAS").is_ok() {
        println!("cargo:rustc-link-lib=dylib=openblas");
    }
}
