use std::fs;
use std::path::{Path, PathBuf};

use hdspace_cli::{run, EXIT_IO, EXIT_OK, EXIT_USAGE};
use hdspace_core::dataset::{read_episode, Manifest, Mode};
use serde_json::Value;

fn hd(args: &[&str]) -> i32 {
    run(std::iter::once("hdspace").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn episode_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "hdse"))
        .collect();
    v.sort();
    v
}

fn corpus(dir: &Path, naive: usize, hd_eps: usize) {
    let n = naive.to_string();
    let h = hd_eps.to_string();
    assert_eq!(hd(&["collect", "--task", "teacup", "--mode", "naive", "--episodes", &n, "--seed", "1", "--out", p(dir)]), 0);
    assert_eq!(hd(&["collect", "--task", "teacup", "--mode", "hd", "--episodes", &h, "--seed", "500", "--out", p(dir)]), 0);
}

#[test]
fn collect_writes_exactly_the_requested_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(hd(&["collect", "--task", "teacup", "--mode", "hd", "--episodes", "2", "--seed", "7", "--out", p(&out)]), EXIT_OK);
    let files = episode_files(&out);
    assert_eq!(files.len(), 2);
    for f in &files {
        let ep = read_episode(f).unwrap();
        assert_eq!(ep.header.mode, Mode::Hd);
        assert!(ep.header.success);
    }
    let stats: Value = serde_json::from_str(&fs::read_to_string(out.join("frame_stats.json")).unwrap()).unwrap();
    assert_eq!(stats["hd"]["episodes"], 2);
    assert_eq!(
        hd(&["collect", "--task", "teacup", "--mode", "hd", "--episodes", "2", "--seed", "7", "--out", p(&out)]),
        EXIT_IO,
        "existing episodes are not overwritten"
    );
}

#[test]
fn collect_respects_spaces_and_belt_speed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let args = ["collect", "--task", "belt-spoon", "--mode", "hd", "--episodes", "3", "--seed", "2", "--belt-speed", "0.08"];
    let mut a = args.to_vec();
    a.extend(["--spaces", "0", "--out", p(&out)]);
    assert_eq!(hd(&a), EXIT_OK);
    for f in episode_files(&out) {
        let h = read_episode(&f).unwrap().header;
        assert_eq!(h.space_index, 0);
        assert_eq!(h.belt_speed, Some(0.08));
    }
    assert_eq!(hd(&["collect", "--task", "teacup", "--mode", "naive", "--episodes", "1", "--belt-speed", "0.08", "--out", p(&out)]), EXIT_USAGE);
    assert_eq!(hd(&["collect", "--task", "teacup", "--mode", "hd", "--episodes", "1", "--spaces", "9", "--out", p(&out)]), EXIT_USAGE);
}

#[test]
fn jobs_do_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let base = ["collect", "--task", "pens", "--mode", "hd", "--episodes", "6", "--seed", "3"];
    assert_eq!(hd(&[&base[..], &["--jobs", "1", "--out", p(&a)]].concat()), 0);
    assert_eq!(hd(&[&base[..], &["--jobs", "3", "--out", p(&b)]].concat()), 0);
    let (fa, fb) = (episode_files(&a), episode_files(&b));
    assert_eq!(fa.len(), 6);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    assert_eq!(hd(&[&base[..], &["--jobs", "0", "--out", p(&dir.path().join("c"))]].concat()), EXIT_USAGE);
}

#[test]
fn train_selects_the_requested_mix_then_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("corpus");
    corpus(&data, 50, 50);
    let run_dir = dir.path().join("runs/mix");
    assert_eq!(
        hd(&["train", "--data", p(&data), "--mix", "N25+H25", "--seed", "4", "--steps", "1", "--out", p(&run_dir)]),
        EXIT_OK
    );
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.episodes.len(), 50);
    let modes: Vec<Mode> = manifest.episodes.iter().map(|e| read_episode(&data.join(e)).unwrap().header.mode).collect();
    assert_eq!(modes.iter().filter(|&&m| m == Mode::Naive).count(), 25);
    assert_eq!(modes.iter().filter(|&&m| m == Mode::Hd).count(), 25);
    let loss = fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2, "header plus one logged step");

    let m1 = dir.path().join("m1.json");
    let m2 = dir.path().join("m2.json");
    let eval = |out: &Path, jobs: &str| {
        hd(&["eval", "--ckpt", p(&run_dir), "--task", "teacup", "--episodes", "4", "--seed", "9", "--jobs", jobs, "--json", p(out)])
    };
    assert_eq!(eval(&m1, "1"), EXIT_OK);
    assert_eq!(eval(&m2, "2"), EXIT_OK);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    let metrics: Value = serde_json::from_str(&fs::read_to_string(&m1).unwrap()).unwrap();
    assert_eq!(metrics["n"], 4);

    let prefix = dir.path().join("table");
    let stats = data.join("frame_stats.json");
    let inputs = [format!("base={}", p(&m1)), format!("again={}", p(&m2)), format!("frames={}", p(&stats))];
    assert_eq!(
        hd(&["report", "--inputs", &inputs[0], &inputs[1], &inputs[2], "--out", p(&prefix)]),
        EXIT_OK
    );
    let md = fs::read_to_string(dir.path().join("table.md")).unwrap();
    assert!(md.contains("base") && md.contains("frames/hd") && md.contains("+0.00"), "{md}");
    assert!(dir.path().join("table.csv").exists());
}

#[test]
fn train_failures_leave_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("corpus");
    corpus(&data, 2, 4);
    let out = dir.path().join("run");
    assert_eq!(hd(&["train", "--data", p(&data), "--mix", "N5+H1", "--steps", "1", "--out", p(&out)]), EXIT_IO);
    assert!(!out.exists());
    assert_eq!(hd(&["train", "--data", p(&data), "--mix", "N-5+H5", "--out", p(&out)]), EXIT_USAGE);
    assert_eq!(hd(&["train", "--data", p(&data), "--mix", "N1", "--steps", "0", "--out", p(&out)]), EXIT_USAGE);
    assert!(!out.exists());
    let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 1, "{leftovers:?}");
}

#[test]
fn malformed_inputs_exit_with_format_code() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.hdcp");
    fs::write(&junk, b"HDCPjunk").unwrap();
    assert_eq!(hd(&["eval", "--ckpt", p(&junk), "--task", "teacup", "--episodes", "1"]), EXIT_IO);
    assert_eq!(hd(&["eval", "--ckpt", p(&dir.path().join("missing")), "--task", "teacup"]), EXIT_IO);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"n\": 3}").unwrap();
    assert_eq!(hd(&["report", "--inputs", p(&bad)]), EXIT_IO);
}

#[test]
fn usage_errors() {
    assert_eq!(hd(&[]), EXIT_USAGE);
    assert_eq!(hd(&["collect", "--task", "teacup"]), EXIT_USAGE);
    assert_eq!(hd(&["collect", "--task", "cube", "--mode", "hd", "--episodes", "1", "--out", "x"]), EXIT_USAGE);
    assert_eq!(hd(&["verify", "--suite", "nope"]), EXIT_USAGE);
    assert_eq!(hd(&["eval", "--ckpt", "x", "--task", "teacup", "--occlude", "1.5"]), EXIT_USAGE);
    assert_eq!(hd(&["serve", "--frobnicate"]), EXIT_USAGE);
    assert_eq!(hd(&["--help"]), EXIT_OK);
}

#[test]
fn config_overlay_is_keyed_by_flag_name_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"task": "teacup", "mode": "hd", "episodes": 3, "seed": 11, "spaces": [0, 3]}"#).unwrap();
    let out = dir.path().join("d");
    assert_eq!(hd(&["collect", "--config", p(&cfg), "--episodes", "2", "--out", p(&out)]), EXIT_OK);
    let files = episode_files(&out);
    assert_eq!(files.len(), 2);
    let spaces: Vec<i32> = files.iter().map(|f| read_episode(f).unwrap().header.space_index).collect();
    assert_eq!(spaces, vec![0, 3]);
    assert!(files[0].ends_with("episode_11_hd0.hdse"));

    fs::write(&cfg, r#"{"task": "teacup", "mode": "hd", "episodes": 1, "colour": "red"}"#).unwrap();
    assert_eq!(hd(&["collect", "--config", p(&cfg), "--out", p(&dir.path().join("e"))]), EXIT_USAGE);
    fs::write(&cfg, "[1, 2]").unwrap();
    assert_eq!(hd(&["collect", "--config", p(&cfg), "--out", p(&dir.path().join("e"))]), EXIT_USAGE);
    assert!(!dir.path().join("e").exists());
}

#[test]
fn verify_grad_passes_on_fresh_params() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("grad.json");
    assert_eq!(hd(&["verify", "--suite", "grad", "--json", p(&json)]), EXIT_OK);
    let v: Value = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(v[0]["suite"], "grad");
    assert_eq!(v[0]["checks"][0]["passed"], true);
}
