use std::path::Path;
use std::process::Command;

// Builds the extension and runs the Python smoke script against it.
#[test]
fn python_smoke_script_passes() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let script = root.join("python/smoke_test.py");
    assert!(script.exists());
    let built = Command::new(env!("CARGO"))
        .args(["build", "-p", "cupe-py"])
        .current_dir(&root)
        .status()
        .expect("cargo runs");
    assert!(built.success());
    let Ok(out) = Command::new("python3").arg(&script).current_dir(&root).output() else {
        eprintln!("python3 not available; skipping");
        return;
    };
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}
