use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn iterlabel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iterlabel"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = iterlabel(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const BOXES: &str = r#"{
  "images": [{"id": "a", "width": 100, "height": 80, "uri": "file://a.jpg", "split": "seed"}],
  "categories": [{"id": 1, "name": "Rockfish"}, {"id": 2, "name": "Sponge"}],
  "annotations": [
    {"id": "s1", "image_id": "a", "category_id": 1, "bbox": [10, 10, 20, 20]},
    {"id": "s2", "image_id": "a", "category_id": 2, "bbox": [90, 60, 30, 30]}
  ]
}"#;

#[test]
fn store_commands_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    ok(&["init", "--store", path(&store), "--classes", "Rockfish,Sponge"]);

    let boxes = dir.path().join("boxes.json");
    fs::write(&boxes, BOXES).unwrap();
    let out = ok(&["import-boxes", "--store", path(&store), path(&boxes)]);
    assert!(out.contains("\"annotations_added\":2"), "{out}");

    let dots = dir.path().join("dots.csv");
    fs::write(&dots, "image_id,x,y,class_label\na,50,40,Sponge\na,-5,10,Rockfish\n").unwrap();
    let out = ok(&["import-dots", "--store", path(&store), path(&dots)]);
    assert!(out.contains("\"annotations_added\":1"), "{out}");

    let export = dir.path().join("export.json");
    ok(&["export", "--store", path(&store), "--states", "seed", "--out", path(&export)]);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&export).unwrap()).unwrap();
    let anns = doc["annotations"].as_array().unwrap();
    assert_eq!(anns.len(), 2);
    // clipped on import: 90+30 > 100
    assert_eq!(anns[1]["bbox"][2], 10.0);

    let predicted = ok(&["export", "--store", path(&store), "--states", "predicted"]);
    assert!(predicted.contains("Sponge") || predicted.contains("\"category_id\": 2"));
}

#[test]
fn failures_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let out = iterlabel(&["import-boxes", "--store", path(&dir.path().join("none")), "x.json"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert!(err["error"].as_str().unwrap().contains("x.json"));

    let store = dir.path().join("store");
    ok(&["init", "--store", path(&store), "--classes", "Rockfish"]);
    let dots = dir.path().join("dots.csv");
    fs::write(&dots, "image_id,x,y,class_label\na,1,1,Octopus\n").unwrap();
    let out = iterlabel(&["import-dots", "--store", path(&store), path(&dots)]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("Octopus"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\nunknown_key = 2\n").unwrap();
    let out = iterlabel(&["run-sim", "--config", path(&cfg), "--out", path(dir.path())]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["causes"].to_string().contains("unknown_key"));

    let cfg = dir.path().join("conflict.toml");
    fs::write(&cfg, "world_file = \"w.json\"\n[world]\nimage_count = 5\n").unwrap();
    let out = iterlabel(&["run-sim", "--config", path(&cfg), "--out", path(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn run_sim_then_report_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(
        &cfg,
        "seed = 4\noutput_dir = \"run\"\n[world]\nimage_count = 30\nseed_images = 5\n[loop]\nmax_loops = 3\n",
    )
    .unwrap();
    let out = ok(&["run-sim", "--config", path(&cfg)]);
    assert!(out.contains("mAP/50"), "{out}");
    let run = dir.path().join("run");
    for f in ["events.jsonl", "world.json", "manifest.json", "reports/summary.csv", "reports/loop_0.json", "reports/loop_1.csv", "traces/loop_0.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let table = ok(&["report", "--run", path(&run), "--verify"]);
    assert!(table.starts_with("Loop"));
    assert!(table.contains("(+"));
    assert!(table.contains("reports identical"));

    // tampering with a report is caught by the replay check
    let p = run.join("reports/loop_1.json");
    let text = fs::read_to_string(&p).unwrap().replacen("\"pending\"", "\"pending\" ", 1);
    fs::write(&p, text).unwrap();
    assert!(!iterlabel(&["report", "--run", path(&run), "--verify"]).status.success());
}
