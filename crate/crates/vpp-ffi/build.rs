fn main() {
    #[cfg(feature = "generate-header")]
    {
        let crate_dir = std::env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR not set");
        let header = std::path::Path::new(&crate_dir).join("include").join("vpp.h");
        cbindgen::generate(&crate_dir)
            .expect("cbindgen failed to generate the C header")
            .write_to_file(header);
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}
