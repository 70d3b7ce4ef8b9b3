use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn runseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_runseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn synth(dir: &Path, out: &str, n: &str) {
    let o = runseg(
        &[
            "synth",
            "--n",
            n,
            "--difficulty",
            "easy",
            "--seed",
            "4",
            "--out",
            out,
            "--size",
            "24",
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a", "3");
    synth(dir.path(), "b", "3");
    let manifest = fs::read_to_string(dir.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 3);
    for name in ["manifest.tsv", "scene_0000.ppm", "scene_0002_gt.pgm"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap()
        );
    }
}

#[test]
fn solve_writes_mask_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s", "1");
    let args = [
        "solve",
        "s/scene_0000.ppm",
        "--gt",
        "s/scene_0000_gt.pgm",
        "--out",
        "m1.pgm",
    ];
    assert_eq!(code(&runseg(&args, dir.path())), 0);
    let o = runseg(
        &[
            "solve",
            "s/scene_0000.ppm",
            "--out",
            "m2.pgm",
            "--trace",
            "t2.csv",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read(dir.path().join("m1.pgm")).unwrap(),
        fs::read(dir.path().join("m2.pgm")).unwrap()
    );
    let trace = fs::read_to_string(dir.path().join("m1.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("stage,"));
    assert!(!lines[4].ends_with(",,"));
    assert!(fs::read_to_string(dir.path().join("t2.csv"))
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .ends_with(",,"));

    // the refiner mode starts from a given mask
    let o = runseg(
        &[
            "solve",
            "s/scene_0000.ppm",
            "--init-mask",
            "s/scene_0000_gt.pgm",
            "--out",
            "m3.pgm",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
}

#[test]
fn train_then_solve_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s", "2");
    fs::write(
        dir.path().join("run.cfg"),
        "# tiny run\nsolver.stages = 1\ntraining.steps = 3\ntraining.hidden = 2\ntraining.batch_size = 1\ntraining.lr = 0.001\n",
    )
    .unwrap();
    for out in ["a.ckpt", "b.ckpt"] {
        let o = runseg(
            &[
                "train",
                "s/manifest.tsv",
                "--config",
                "run.cfg",
                "--out",
                out,
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        fs::read(dir.path().join("a.ckpt")).unwrap(),
        fs::read(dir.path().join("b.ckpt")).unwrap()
    );
    let curve = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert_eq!(curve, fs::read_to_string(dir.path().join("b.csv")).unwrap());

    let o = runseg(
        &[
            "solve",
            "s/scene_0001.ppm",
            "--checkpoint",
            "a.ckpt",
            "--out",
            "pred.pgm",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("pred.pgm").is_file());
}

#[test]
fn eval_scores_matching_files() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "s", "2");
    fs::create_dir(dir.path().join("pred")).unwrap();
    for i in 0..2 {
        fs::copy(
            dir.path().join(format!("s/scene_000{i}_gt.pgm")),
            dir.path().join(format!("pred/scene_000{i}.pgm")),
        )
        .unwrap();
    }
    let o = runseg(&["eval", "pred", "s"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3], "mean,0,1,1,1");

    fs::write(dir.path().join("pred/orphan.pgm"), b"P5 1 1 255\n\0").unwrap();
    assert_eq!(code(&runseg(&["eval", "pred", "s"], dir.path())), 2);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&runseg(&["--help"], p)), 0);
    assert_eq!(code(&runseg(&[], p)), 1);
    assert_eq!(code(&runseg(&["solve", "--bogus"], p)), 1);
    assert_eq!(code(&runseg(&["solve"], p)), 1);
    assert_eq!(
        code(&runseg(
            &[
                "synth",
                "--n",
                "1",
                "--difficulty",
                "extreme",
                "--seed",
                "1",
                "--out",
                "x"
            ],
            p
        )),
        1
    );
    fs::write(p.join("bad.cfg"), "solver.gamma = 1\n").unwrap();
    let o = runseg(&["solve", "img.pgm", "--config", "bad.cfg"], p);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("solver.gamma"));

    assert_eq!(code(&runseg(&["solve", "missing.pgm"], p)), 2);
    fs::write(p.join("broken.pgm"), b"P5\n4 4\n255\n\x01\x02").unwrap();
    let o = runseg(&["solve", "broken.pgm"], p);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte"));
}
