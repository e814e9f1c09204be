//! Compiles and runs a small C program against the generated header and
//! the static library. Skipped when no C compiler is available.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <math.h>
#include "gendilate.h"

int main(void) {
    size_t shape[1] = {5};
    double xs[5] = {1, 2, 3, 4, 5};
    size_t kshape[1] = {2};
    double ks[2] = {1, 1};
    GdTensor *x = NULL, *k = NULL, *y = NULL;
    if (gd_tensor_new(shape, 1, xs, 5, &x) != GD_STATUS_OK) return 10;
    if (gd_tensor_new(kshape, 1, ks, 2, &k) != GD_STATUS_OK) return 11;
    if (gd_conv_direct(x, k, 2, false, true, &y) != GD_STATUS_OK) return 12;
    const double *out = gd_tensor_data(y);
    if (gd_tensor_len(y) != 3 || out[0] != 4 || out[1] != 6 || out[2] != 8) return 13;
    double b = 0;
    if (gd_barrier(0.5, 0.0, &b) != GD_STATUS_OK || fabs(b - 1.0) > 1e-12) return 14;
    if (gd_barrier(0.5, 1.0, &b) != GD_STATUS_INVALID_ARGUMENT) return 15;
    if (gd_last_error()[0] == '\0') return 16;
    gd_tensor_free(x);
    gd_tensor_free(k);
    gd_tensor_free(y);
    printf("ok %s\n", gd_version());
    return 0;
}
"#;

fn compiler() -> Option<String> {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    Command::new(&cc).arg("--version").output().ok().map(|_| cc)
}

#[test]
fn c_program_links_and_runs() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test binary> -> target/<profile>
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libgendilate_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());

    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("smoke.c");
    let exe = tmp.path().join("smoke");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.trim(), format!("ok {}", env!("CARGO_PKG_VERSION")));
}
