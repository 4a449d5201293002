use std::path::{Path, PathBuf};
use std::process::Command;

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

/// `target/<profile>`, found from the running test binary in `deps/`.
fn profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_is_generated_and_complete() {
    let h = std::fs::read_to_string(manifest_dir().join("include/dada.h")).unwrap();
    for sym in [
        "typedef struct DadaModel DadaModel",
        "DADA_STATUS_NULL_POINTER = 1",
        "DADA_STATUS_PANIC = 7",
        "dada_last_error(void)",
        "dada_train(",
        "dada_model_predict(",
        "dada_report_jsonl(",
    ] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let include = manifest_dir().join("include");
    for (lang, std) in [("c", "-std=c99"), ("c++", "-std=c++11")] {
        let status = Command::new("cc")
            .args(["-fsyntax-only", "-Wall", "-Werror", std, "-x", lang, "-I"])
            .arg(&include)
            .arg(include.join("dada.h"))
            .status()
            .expect("cc");
        assert!(status.success(), "{lang}");
    }
}

#[test]
fn c_program_links_and_runs() {
    let lib = profile_dir().join("libdada_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(manifest_dir().join("include"))
        .arg(manifest_dir().join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("cc");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
