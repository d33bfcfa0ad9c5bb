use std::path::PathBuf;
use std::process::Command;

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/twinbeam.h")
}

#[test]
fn header_declares_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "typedef struct TbJointDist TbJointDist",
        "typedef struct TbStream TbStream",
        "TB_STATUS_BUFFER_TOO_SMALL = 5",
        "tb_last_error(",
        "tb_simulate(",
        "tb_reconstruct(",
        "tb_dist_free(",
        "tb_stream_free(",
    ] {
        assert!(h.contains(name), "missing {name}");
    }
}

const PROGRAM: &str = r#"
#include <stdio.h>
#include "twinbeam.h"
int main(void) {
    TbTwbParams p; TbDetector s, i;
    tb_presets(&p, &s, &i);
    TbJointDist *d = NULL;
    if (tb_compound_photocounts(&p, &s, &i, 10, &d) != TB_STATUS_OK) return 1;
    TbStats st;
    if (tb_dist_stats(d, &st) != TB_STATUS_OK) return 2;
    tb_dist_free(d);
    if (tb_compound_photocounts(&p, &s, &i, 10, NULL) != TB_STATUS_NULL_POINTER) return 3;
    char msg[128];
    if (tb_last_error(msg, sizeof msg) == 0) return 4;
    printf("%.4f\n", st.nrp);
    return 0;
}
"#;

/// Compiles and runs a C client against the static library when a C compiler is present.
#[test]
fn c_client_links() {
    let deps = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/debug");
    let lib = deps.join("libtwinbeam_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    let exe = dir.path().join("client");
    std::fs::write(&src, PROGRAM).unwrap();
    let inc = header().parent().unwrap().to_path_buf();
    let st = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&inc)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(st.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "client exit {:?}", out.status);
    let nrp: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((nrp - 0.7031).abs() < 1e-3);
}
