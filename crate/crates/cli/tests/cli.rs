//! End-to-end behaviour of the `mba` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mba::suite::Suite;

fn mba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mba")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mba(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_suite(dir: &Path) {
    ok(&["gen-world", "--seed", "3", "--nodes", "14", "--worlds", "2", "--episodes", "3", "--out", p(dir)]);
}

const SMALL_MODEL: [&str; 6] = ["--hidden", "8", "--ffn-hidden", "8", "--epochs", "2"];

#[test]
fn episodes_respect_the_minimum_separation() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-world", "--nodes", "25", "--worlds", "3", "--episodes", "20", "--min-distance", "7.5", "--out", p(dir.path())]);
    let suite = Suite::read(dir.path()).unwrap();
    for (w, e) in suite.iter_episodes() {
        let g = &suite.worlds[w];
        let geodesic = g.distances_from(e.start).unwrap()[e.goal];
        assert!(geodesic >= 7.5, "episode {} of world {w} is {geodesic} m long", e.episode_id);
        assert_eq!(e.gt_distance(g).unwrap(), geodesic);
    }
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mba(&["gen-world", "--nodes", "0", "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(mba(&["gen-world", "--seed", "1000", "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(mba(&["gen-world", "--nodez", "3"]).status.code(), Some(2));
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "nodes: 3\n").unwrap();
    assert_eq!(mba(&["gen-world", "--config", p(&cfg)]).status.code(), Some(2));
    small_suite(dir.path());
    let out = mba(&["train", "--data", p(dir.path()), "--branches", "g:og,g:og", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_feeds_options() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    fs::write(&cfg, "# tiny\nnodes = 12\nworlds = 2\nepisodes = 4\n").unwrap();
    let a = dir.path().join("a");
    ok(&["gen-world", "--config", p(&cfg), "--episodes", "2", "--out", p(&a)]);
    let suite = Suite::read(&a).unwrap();
    assert_eq!(suite.len(), 2);
    assert_eq!(suite.worlds[0].len(), 12);
    assert_eq!(suite.episode_count(), 4);
}

#[test]
fn zero_learning_rate_keeps_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    small_suite(&data);
    let mut args = vec!["train", "--data", p(&data), "--out", p(&model), "--lr", "0"];
    args.extend(SMALL_MODEL);
    ok(&args);
    let init = fs::read(model.join("init.json")).unwrap();
    assert_eq!(fs::read(model.join("checkpoint.json")).unwrap(), init);
    let log = fs::read_to_string(model.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,mean_loss,term1,term2,term3,train_SR");
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn diverging_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    small_suite(dir.path());
    let mut args = vec!["train", "--data", p(dir.path()), "--out", p(dir.path()), "--lr", "1e300", "--batch-size", "1"];
    args.extend(SMALL_MODEL);
    assert_eq!(mba(&args).status.code(), Some(3));
}

#[test]
fn mismatched_checkpoint_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let other = dir.path().join("other");
    let model = dir.path().join("model");
    small_suite(&data);
    ok(&["gen-world", "--nodes", "14", "--episodes", "2", "--object-dim", "8", "--out", p(&other)]);
    let mut args = vec!["train", "--data", p(&data), "--out", p(&model)];
    args.extend(SMALL_MODEL);
    ok(&args);
    let ckpt = model.join("checkpoint.json");
    let out = mba(&["eval", "--data", p(&other), "--checkpoint", p(&ckpt), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
    let broken = dir.path().join("broken.json");
    fs::write(&broken, fs::read_to_string(&ckpt).unwrap().replacen("\"hidden_dim\": 8", "\"hidden_dim\": 9", 1)).unwrap();
    let out = mba(&["eval", "--data", p(&data), "--checkpoint", p(&broken), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

#[test]
fn summary_matches_the_per_episode_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    let eval = dir.path().join("eval");
    small_suite(&data);
    let mut args = vec!["train", "--data", p(&data), "--out", p(&model)];
    args.extend(SMALL_MODEL);
    ok(&args);
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&model.join("checkpoint.json")), "--out", p(&eval), "--dump-traj"]);
    let rows = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let summary = fs::read_to_string(eval.join("summary.csv")).unwrap();
    for name in ["TL", "NE", "SR", "SPL", "RGS", "RGSPL"] {
        let per = column(&rows, name);
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        // rows are rounded to 6 decimals before averaging
        assert!((mean - column(&summary, name)[0]).abs() < 1e-6, "{name}");
    }
    let steps: usize = column(&rows, "steps").iter().map(|&s| s as usize).sum();
    let traj = fs::read_to_string(eval.join("trajectories.jsonl")).unwrap();
    assert_eq!(traj.lines().count(), steps);
}

#[test]
fn expert_policy_is_perfect_on_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    for split in ["seen", "unseen"] {
        let data = dir.path().join(split);
        ok(&["gen-world", "--split", split, "--nodes", "20", "--worlds", "3", "--episodes", "10", "--out", p(&data)]);
        ok(&["eval", "--data", p(&data), "--policy", "oracle", "--out", p(&data)]);
        let summary = fs::read_to_string(data.join("summary.csv")).unwrap();
        assert_eq!(column(&summary, "SR"), [1.0]);
        assert_eq!(column(&summary, "SPL"), [1.0]);
    }
}

#[test]
fn greedy_eval_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    small_suite(dir.path());
    assert_eq!(mba(&["eval", "--data", p(dir.path()), "--out", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn one_cell_grid_equals_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--nodes", "14", "--hidden", "8", "--ffn-hidden", "8", "--epochs", "2"];
    let grid = dir.path().join("grid");
    let mut args = vec!["ablate", "--seeds", "4", "--worlds", "2", "--episodes", "3", "--eval-episodes", "2", "--unseen-worlds", "2"];
    args.extend(common);
    args.extend(["--out", p(&grid)]);
    ok(&args);

    let train = dir.path().join("train");
    let seen = dir.path().join("seen");
    let unseen = dir.path().join("unseen");
    ok(&["gen-world", "--seed", "4", "--nodes", "14", "--worlds", "2", "--episodes", "3", "--out", p(&train)]);
    ok(&["gen-world", "--seed", "4", "--nodes", "14", "--worlds", "2", "--episodes", "2", "--first-episode", "3", "--out", p(&seen)]);
    ok(&["gen-world", "--seed", "4", "--split", "unseen", "--nodes", "14", "--worlds", "2", "--episodes", "2", "--out", p(&unseen)]);
    let model = dir.path().join("model");
    let mut args = vec!["train", "--seed", "4", "--data", p(&train), "--out", p(&model)];
    args.extend(&common[2..]);
    ok(&args);
    let ckpt = model.join("checkpoint.json");
    let mut expected = Vec::new();
    for (split, data) in [("seen", &seen), ("unseen", &unseen)] {
        ok(&["eval", "--data", p(data), "--checkpoint", p(&ckpt), "--out", p(data)]);
        let s = fs::read_to_string(data.join("summary.csv")).unwrap();
        let v: Vec<&str> = s.lines().nth(1).unwrap().split(',').collect();
        expected.push(format!("\"g:og,l:og\",0.500000,4,{split},{},{},{},{},ok", v[3], v[4], v[5], v[6]));
    }
    let csv = fs::read_to_string(grid.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().skip(1).collect::<Vec<_>>(), expected);
}

#[test]
fn pivot_entries_match_the_long_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "ablate", "--seeds", "1,2", "--nodes", "14", "--worlds", "2", "--episodes", "2", "--eval-episodes", "2",
        "--unseen-worlds", "2", "--hidden", "8", "--ffn-hidden", "8", "--epochs", "1",
    ];
    args.extend(["--globals=-,rn", "--locals=-,pv0.5", "--out", p(dir.path())]);
    ok(&args);
    let long = fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let matrix = fs::read_to_string(dir.path().join("spl_matrix.csv")).unwrap();
    let mut lines = matrix.lines();
    let cols: Vec<String> = lines.next().unwrap().split(',').skip(3).map(String::from).collect();
    assert_eq!(cols, ["og", "og+pv0.5"]);
    let mut checked = 0;
    for row in lines {
        let f: Vec<&str> = row.split(',').collect();
        let (split, global) = (f[0], f[2]);
        for (j, local) in cols.iter().enumerate() {
            let mut config = vec!["g:og".to_string(), "l:og".to_string()];
            config.push(global.strip_prefix("og+").map_or("-".into(), |s| format!("g:{s}")));
            config.push(local.strip_prefix("og+").map_or("-".into(), |s| format!("l:{s}")));
            let name = config.join(",");
            let name = name.trim_end_matches(",-").trim_end_matches(",-");
            let spls: Vec<f64> = long
                .lines()
                .filter(|l| l.starts_with(&format!("\"{name}\",")) && l.contains(&format!(",{split},")))
                .map(|l| l.rsplit(',').nth(3).unwrap().parse().unwrap())
                .collect();
            assert_eq!(spls.len(), 2, "{name} {split}");
            let mean = spls.iter().sum::<f64>() / 2.0;
            assert!((mean - f[3 + j].parse::<f64>().unwrap()).abs() <= 1e-6, "{name} {split}");
            checked += 1;
        }
    }
    assert_eq!(checked, 8);
}
