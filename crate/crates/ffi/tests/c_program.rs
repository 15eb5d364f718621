//! Compiles a small C program against the generated header and the static
//! library. Skipped when no C compiler is on PATH.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "rsmgan.h"

int main(void) {
    double r[9] = {2, 2, 2, 2, 0, 0, 2, 0, 0};
    size_t score = 0;
    if (rsmgan_score(r, 3, 1.0, true, &score) != RSMGAN_STATUS_OK || score != 5) return 1;

    double scores[5] = {9, 7, 1, 0.8, 0.6};
    size_t sel[5], k = 0;
    if (rsmgan_select_elbow(scores, 5, sel, 5, &k) != RSMGAN_STATUS_OK) return 2;
    if (k != 2 || sel[0] != 0 || sel[1] != 1) return 3;

    size_t windows[2] = {5, 3};
    double values[20] = {0};
    RsmganMcm *mcm = NULL;
    if (rsmgan_mcm_build(values, 1, 20, windows, 2, 2, &mcm) != RSMGAN_STATUS_INVALID_ARGUMENT) return 4;
    if (mcm != NULL || rsmgan_last_error() == NULL) return 5;

    windows[0] = 3; windows[1] = 5;
    for (int i = 0; i < 20; i++) values[i] = i % 4;
    if (rsmgan_mcm_build(values, 1, 20, windows, 2, 2, &mcm) != RSMGAN_STATUS_OK) return 6;
    if (rsmgan_mcm_len(mcm) != 10) return 7;
    rsmgan_mcm_free(mcm);

    printf("%s\n", rsmgan_version());
    return 0;
}
"#;

/// The test binary lives next to the library in `<profile>/deps`.
fn deps_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let lib = deps_dir().join("librsmgan_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let bin = dir.path().join("main");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new(&cc)
        .arg("-std=c11")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        env!("CARGO_PKG_VERSION")
    );
}
