use std::path::Path;
use std::process::Command;

use featsr::ImageBuffer;

fn featsr(args: &[&str], root: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_featsr"))
        .args(args)
        .env("FEATSR_OUT", root)
        .current_dir(root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn featsr")
}

#[test]
fn smoke_experiment_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = featsr(&["--seed", "5", "experiment", "--preset", "smoke", "--out", run], root.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let dir = root.path().join(run);
        assert!(dir.join("report.csv").exists());
        reports.push(std::fs::read(dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);

    let out = featsr(&["report", "--dir", "a"], root.path());
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout);
    for row in ["t2i", "f2i"] {
        assert!(table.contains(row), "missing {row} in\n{table}");
    }
}

#[test]
fn unknown_stage_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let out = featsr(&["experiment", "--preset", "smoke", "--stages", "data,bogus"], root.path());
    assert!(!out.status.success());
}

#[test]
fn degrade_writes_quarter_size_images_and_recipes() {
    let root = tempfile::tempdir().unwrap();
    let input = root.path().join("hr");
    std::fs::create_dir_all(&input).unwrap();
    let img = ImageBuffer::from_fn(48, 64, |y, x, c| ((x * 3 + y * 5 + c * 7) % 50) as f32 / 49.0);
    img.save_png(input.join("p.png")).unwrap();
    let out = featsr(&["--seed", "2", "degrade", "--in", "hr", "--out", "lr"], root.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lr = ImageBuffer::load(root.path().join("lr/p.png")).unwrap();
    assert_eq!(lr.dims(), (12, 16));
    assert!(root.path().join("lr/p.recipe.json").exists());
}
