//! Compiles and runs a small C program against the generated header and the
//! static library, so the header is checked by a real C compiler.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "elt.h"

int main(void) {
    double q[6] = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
    double out_std[6], out_loc[6];
    if (elt_attention(ELT_KERNEL_STANDARD, q, q, q, 3, 2, 0, out_std) != ELT_STATUS_OK) return 10;
    if (elt_attention(ELT_KERNEL_LOCAL, q, q, q, 3, 2, 4, out_loc) != ELT_STATUS_OK) return 11;
    for (int i = 0; i < 6; i++) {
        double d = out_std[i] - out_loc[i];
        if (d > 1e-12 || d < -1e-12) return 12;
    }
    unsigned char pred[6] = {1, 1, 0, 0, 1, 0};
    unsigned char truth[6] = {1, 1, 0, 0, 0, 1};
    double f1 = 0, mcc = 0;
    if (elt_f1_mcc(pred, truth, 6, &f1, &mcc) != ELT_STATUS_OK) return 13;
    EltModel *m = NULL;
    if (elt_model_load("/nonexistent/model.eltc", &m) != ELT_STATUS_IO) return 14;
    if (m != NULL || strlen(elt_last_error()) == 0) return 15;
    printf("%s %.6f %.6f\n", elt_version(), f1, mcc);
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    // target/<profile>/deps/<test binary>
    let profile_dir = exe.parent().and_then(|p| p.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("libelt_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler ({cc}) available; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let bin = dir.path().join("smoke");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&bin)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.trim(), format!("{} 0.666667 0.333333", env!("CARGO_PKG_VERSION")));
}
