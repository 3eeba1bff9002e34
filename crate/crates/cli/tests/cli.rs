//! End-to-end runs of the `m3fas` binary.

use std::path::Path;
use std::process::{Command, Output};

fn m3fas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m3fas"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn simulate_train_eval_infer() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("cfg.txt"),
        "train.epochs = 2\ntrain.batch_size = 16\n",
    )
    .unwrap();

    let o = m3fas(d, &["gen-signal", "--out", "probe.wav"]);
    assert_eq!(code(&o), 0);
    assert!(d.join("probe.wav").exists());

    let o = m3fas(
        d,
        &[
            "simulate",
            "--n",
            "48",
            "--devices",
            "2",
            "--out",
            "data",
            "--seed",
            "1",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(d.join("data/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 49);
    assert!(manifest.starts_with("id\tlabel\tdevice\timage_path\twav_path\tscenario_json"));

    let o = m3fas(
        d,
        &[
            "extract",
            "--wav",
            "data/audio/d0_bonafide_00000.wav",
            "--out",
            "spec.m3fs",
        ],
    );
    assert_eq!(code(&o), 0);
    let spec = m3fas_core::harness::Checkpoint::load(&d.join("spec.m3fs")).unwrap();
    assert_eq!(spec.records.len(), 1);
    assert_eq!(spec.records[0].name, "spectrogram");

    let o = m3fas(
        d,
        &[
            "train",
            "--config",
            "cfg.txt",
            "--data",
            "data",
            "--out",
            "model.m3fs",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = m3fas(
        d,
        &[
            "eval",
            "--ckpt",
            "model.m3fs",
            "--data",
            "data",
            "--split",
            "test",
        ],
    );
    assert_eq!(code(&o), 0);
    let tsv = stdout(&o);
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "metric\thead\tvalue");
    assert_eq!(lines.len(), 13);
    for head in ["vision", "acoustic", "fusion"] {
        assert_eq!(
            lines
                .iter()
                .filter(|l| l.split('\t').nth(1) == Some(head))
                .count(),
            4
        );
    }

    let img = "data/images/d1_attack_00003.png";
    let wav = "data/audio/d1_attack_00003.wav";
    let o = m3fas(
        d,
        &[
            "infer",
            "--ckpt",
            "model.m3fs",
            "--image",
            img,
            "--wav",
            wav,
            "--route",
            "f",
        ],
    );
    assert_eq!(code(&o), 0);
    let fused = stdout(&o);
    assert_eq!(fused.lines().count(), 3);
    for l in fused.lines() {
        let s: f64 = l.split('\t').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&s));
    }
    let o = m3fas(
        d,
        &[
            "infer",
            "--ckpt",
            "model.m3fs",
            "--image",
            img,
            "--route",
            "v",
        ],
    );
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), fused.lines().next().unwrap());

    let o = m3fas(
        d,
        &[
            "infer",
            "--ckpt",
            "model.m3fs",
            "--image",
            img,
            "--route",
            "f",
        ],
    );
    assert_eq!(code(&o), 3);
    let o = m3fas(
        d,
        &[
            "infer",
            "--ckpt",
            "model.m3fs",
            "--wav",
            wav,
            "--route",
            "v",
        ],
    );
    assert_eq!(code(&o), 3);
    let o = m3fas(
        d,
        &[
            "infer",
            "--ckpt",
            "model.m3fs",
            "--image",
            img,
            "--route",
            "q",
        ],
    );
    assert_eq!(code(&o), 2);
    let o = m3fas(
        d,
        &[
            "eval",
            "--ckpt",
            "model.m3fs",
            "--data",
            "data",
            "--split",
            "holdout",
        ],
    );
    assert_eq!(code(&o), 2);
    let o = m3fas(d, &["eval", "--ckpt", "probe.wav", "--data", "data"]);
    assert_eq!(code(&o), 2);

    std::fs::write(
        d.join("bad.txt"),
        "train.epochs = 1\ntrain.batch_size = 16\ntrain.lr = 1e200\n",
    )
    .unwrap();
    let o = m3fas(
        d,
        &[
            "train", "--config", "bad.txt", "--data", "data", "--out", "bad.m3fs",
        ],
    );
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("L_f"));
}

#[test]
fn invalid_arguments_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&m3fas(d, &["simulate", "--n", "5", "--out", "x"])), 2);
    assert_eq!(
        code(&m3fas(d, &["train", "--data", "missing", "--out", "m"])),
        2
    );
    assert_eq!(
        code(&m3fas(d, &["extract", "--wav", "nope.wav", "--out", "s"])),
        2
    );
    assert_eq!(code(&m3fas(d, &["frobnicate"])), 2);
    std::fs::write(d.join("c.txt"), "train.alpha = -1\n").unwrap();
    assert_eq!(
        code(&m3fas(
            d,
            &["gen-signal", "--config", "c.txt", "--out", "p.wav"]
        )),
        2
    );
}

#[test]
fn silent_recording_fails_preprocessing_but_vision_still_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("cfg.txt"),
        "train.epochs = 1\ntrain.batch_size = 16\n",
    )
    .unwrap();
    assert_eq!(
        code(&m3fas(
            d,
            &["simulate", "--n", "24", "--devices", "1", "--out", "data"]
        )),
        0
    );
    assert_eq!(
        code(&m3fas(
            d,
            &["train", "--config", "cfg.txt", "--data", "data", "--out", "m.m3fs"]
        )),
        0
    );
    let silent = m3fas_core::signal::Waveform::silence(40_000, 44_100);
    m3fas_core::signal::write_wav(&silent, &d.join("silent.wav")).unwrap();
    let img = "data/images/d0_bonafide_00000.png";
    let o = m3fas(
        d,
        &[
            "infer",
            "--ckpt",
            "m.m3fs",
            "--image",
            img,
            "--wav",
            "silent.wav",
            "--route",
            "f",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("preprocessed"));
    let o = m3fas(
        d,
        &[
            "infer",
            "--ckpt",
            "m.m3fs",
            "--image",
            img,
            "--wav",
            "silent.wav",
            "--route",
            "v",
        ],
    );
    assert_eq!(code(&o), 0);
}
