use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vidroute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidroute"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(path: &Path, subjects: &str, seed: &str) -> Output {
    vidroute(&[
        "gen-data",
        "--out",
        s(path),
        "--subjects",
        subjects,
        "--videos-per-subject",
        "2",
        "--frames",
        "8",
        "--tokens-per-frame",
        "16",
        "--noise",
        "0.02",
        "--seed",
        seed,
    ])
}

const SHORT_RUN: &str = "# short desk run\nprofile = desk\nsteps = 6\nlog_every = 2\n";

#[test]
fn gen_data_writes_a_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.lvid");
    let stdout = ok(&gen(&path, "3", "1"));
    assert!(stdout.contains("wrote 6 samples"));
    let data = vidroute::data::load_dataset(&path).unwrap();
    assert_eq!(data.len(), 6);
    let again = dir.path().join("again.lvid");
    ok(&gen(&again, "3", "1"));
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, held, cfg) = (
        dir.path().join("d.lvid"),
        dir.path().join("h.lvid"),
        dir.path().join("run.cfg"),
    );
    ok(&gen(&data, "2", "1"));
    ok(&gen(&held, "1", "2"));
    fs::write(&cfg, SHORT_RUN).unwrap();
    let run = dir.path().join("run");
    let stdout = ok(&vidroute(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--mode",
        "joint",
    ]));
    assert!(stdout.contains("step 6:"));
    let ckpt = run.join("checkpoint.lvck");
    assert!(ckpt.exists());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,l_diff,l_route,l_total,wall_ms");
    assert_eq!(metrics.lines().count(), 4);
    assert!(fs::read_to_string(run.join("config.txt"))
        .unwrap()
        .contains("mode = joint"));

    let sample = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "sample",
            "--ckpt",
            s(&ckpt),
            "--seed",
            "7",
            "--steps",
            "3",
            "--cfg-scale",
            "6",
            "--chunks",
            "4",
            "--out",
            s(out),
        ];
        args.extend_from_slice(extra);
        ok(&vidroute(&args));
        fs::read(out).unwrap()
    };
    let a = sample(&dir.path().join("a.lvid"), &[]);
    let b = sample(&dir.path().join("b.lvid"), &[]);
    let c = sample(&dir.path().join("c.lvid"), &["--no-tam"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(
        vidroute::data::load_dataset(dir.path().join("a.lvid")).unwrap().len(),
        1
    );

    let report = dir.path().join("report.csv");
    ok(&vidroute(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&held),
        "--report",
        s(&report),
    ]));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "routing_accuracy,mean_route_loss,mean_diff_loss,temporal_deviation_before,temporal_deviation_after"
    );
    assert_eq!(lines[1].split(',').count(), 5);
}

#[test]
fn resume_continues_to_the_configured_step() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg, longer) = (
        dir.path().join("d.lvid"),
        dir.path().join("a.cfg"),
        dir.path().join("b.cfg"),
    );
    ok(&gen(&data, "1", "3"));
    fs::write(&cfg, "steps = 2\n").unwrap();
    fs::write(&longer, "steps = 4\n").unwrap();
    let train = |config: &Path, out: &Path, resume: Option<&Path>| {
        let mut args = vec![
            "train",
            "--config",
            s(config),
            "--data",
            s(&data),
            "--out",
            s(out),
            "--mode",
            "tam-only",
        ];
        if let Some(r) = resume {
            args.extend_from_slice(&["--resume", s(r)]);
        }
        ok(&vidroute(&args))
    };
    train(&cfg, &dir.path().join("first"), None);
    let stdout = train(
        &longer,
        &dir.path().join("second"),
        Some(&dir.path().join("first/checkpoint.lvck")),
    );
    assert!(stdout.contains("step 4:"));
    let straight = dir.path().join("straight");
    train(&longer, &straight, None);
    assert_eq!(
        fs::read(dir.path().join("second/checkpoint.lvck")).unwrap(),
        fs::read(straight.join("checkpoint.lvck")).unwrap()
    );
}

#[test]
fn gradcheck_kernel_passes() {
    let stdout = ok(&vidroute(&["gradcheck", "--module", "kernel", "--eps", "1e-5"]));
    assert!(stdout.contains("tolerance"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.lvck");
    let out = vidroute(&[
        "eval",
        "--ckpt",
        s(&missing),
        "--data",
        s(&missing),
        "--report",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.lvck");
    fs::write(&bad, b"NOPE0000").unwrap();
    let out = vidroute(&[
        "eval",
        "--ckpt",
        s(&bad),
        "--data",
        s(&bad),
        "--report",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "stepz = 3\n").unwrap();
    let data = dir.path().join("d.lvid");
    ok(&gen(&data, "1", "1"));
    let out = vidroute(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(dir.path()),
        "--mode",
        "joint",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    fs::write(&cfg, "frames = 6\n").unwrap();
    let out = vidroute(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(dir.path()),
        "--mode",
        "joint",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = vidroute(&[
        "gen-data",
        "--out",
        s(&data),
        "--subjects",
        "1",
        "--videos-per-subject",
        "1",
        "--frames",
        "8",
        "--tokens-per-frame",
        "2",
        "--noise",
        "0.02",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = vidroute(&["train", "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(2));
}
