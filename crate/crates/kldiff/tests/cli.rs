use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kldiff::checkpoint::{load_checkpoint, save_checkpoint};

const TINY: &str = "\
# small enough to train in well under a second
schedule.steps = 10
schedule.beta_min = 0.01
schedule.beta_max = 0.2
model.patch = 8
model.d_img = 8
model.d_txt = 8
model.d_k = 4
model.hidden = 8
model.n_blocks = 1
train.epochs = 2
train.batch_size = 16
finetune.period = 1
data.n = 40
metrics.n_gen = 8
metrics.feature_dim = 4
";

fn kldiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kldiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "expected one stderr line, got {text:?}");
    text.trim_end().to_string()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.path("tiny.cfg"), TINY).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        let p = self.path("data.csv");
        if !p.exists() {
            let out = kldiff(&["gen-data", "--config", s(&self.path("tiny.cfg")), "--out", s(&p)]);
            assert!(out.status.success(), "{out:?}");
        }
        p
    }

    fn trained(&self) -> PathBuf {
        let p = self.path("m.ckpt");
        if !p.exists() {
            let out = kldiff(&[
                "train",
                "--config",
                s(&self.path("tiny.cfg")),
                "--dataset",
                s(&self.data()),
                "--out",
                s(&p),
                "--seed",
                "3",
            ]);
            assert!(out.status.success(), "{out:?}");
        }
        p
    }
}

#[test]
fn gen_data_is_deterministic() {
    let ws = Workspace::new();
    let a = ws.data();
    let b = ws.path("again.csv");
    assert!(kldiff(&["gen-data", "--config", s(&ws.path("tiny.cfg")), "--out", s(&b)]).status.success());
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 41);
    assert_eq!(text.lines().next(), Some("shape,color,position,size"));
    let c = ws.path("other.csv");
    let out = kldiff(&["gen-data", "--config", s(&ws.path("tiny.cfg")), "--seed", "9", "--out", s(&c)]);
    assert!(out.status.success());
    assert_ne!(text, fs::read_to_string(&c).unwrap());
}

#[test]
fn train_writes_checkpoint_and_history() {
    let ws = Workspace::new();
    let ckpt_path = ws.trained();
    let ckpt = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(ckpt.state.epoch, 2);
    assert_eq!(ckpt.config.train.seed, 3);
    let history = fs::read_to_string(ws.path("m.ckpt.history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,mean_loss,per_t_q1,per_t_median,per_t_q3,gate,buffer_size");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));

    // the same command again reproduces the checkpoint byte for byte
    let again = ws.path("again.ckpt");
    let out = kldiff(&[
        "train",
        "--config",
        s(&ws.path("tiny.cfg")),
        "--dataset",
        s(&ws.data()),
        "--out",
        s(&again),
        "--seed",
        "3",
    ]);
    assert!(out.status.success());
    assert_eq!(fs::read(&ckpt_path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn train_mode_switches_ablation() {
    let ws = Workspace::new();
    let out_path = ws.path("nollm.ckpt");
    let out = kldiff(&[
        "train",
        "--config",
        s(&ws.path("tiny.cfg")),
        "--dataset",
        s(&ws.data()),
        "--out",
        s(&out_path),
        "--mode",
        "no_llm",
    ]);
    assert!(out.status.success(), "{out:?}");
    assert!(load_checkpoint(&out_path).unwrap().config.guidance.unconditional);
    let bad = kldiff(&[
        "train",
        "--dataset",
        s(&ws.data()),
        "--out",
        s(&ws.path("x.ckpt")),
        "--mode",
        "partial",
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr_line(&bad).starts_with("error kind=usage code=2"));
}

#[test]
fn sample_writes_ppm_files() {
    let ws = Workspace::new();
    let dir = ws.path("samples");
    let out = kldiff(&[
        "sample",
        "--checkpoint",
        s(&ws.trained()),
        "--caption",
        "a red circle in the top-left",
        "--n",
        "2",
        "--seed",
        "5",
        "--out",
        s(&dir),
    ]);
    assert!(out.status.success(), "{out:?}");
    let mut names: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["sample_0.ppm", "sample_1.ppm"]);
    let bytes = fs::read(dir.join("sample_0.ppm")).unwrap();
    assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(bytes.len(), 13 + 16 * 16 * 3);
}

#[test]
fn sample_zero_is_an_error_and_writes_nothing() {
    let ws = Workspace::new();
    let dir = ws.path("none");
    let out = kldiff(&[
        "sample",
        "--checkpoint",
        s(&ws.trained()),
        "--caption",
        "a red circle in the top-left",
        "--n",
        "0",
        "--out",
        s(&dir),
    ]);
    assert_eq!(out.status.code(), Some(12));
    assert!(stderr_line(&out).starts_with("error kind=invalid_input code=12 msg="));
    assert!(!dir.exists());
}

#[test]
fn eval_is_rerun_stable_and_needs_a_seed() {
    let ws = Workspace::new();
    let ckpt = ws.trained();
    let data = ws.data();
    let args = ["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--seed", "11"];
    let a = kldiff(&args);
    let b = kldiff(&args);
    assert!(a.status.success(), "{a:?}");
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "run_id,mode,fid,is,alignment,n_samples,extractor_seed");
    assert!(lines[1].starts_with("m,full,"), "{}", lines[1]);
    assert!(lines[1].ends_with(",8,7"));

    let unseeded = kldiff(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data)]);
    assert_eq!(unseeded.status.code(), Some(2));
    stderr_line(&unseeded);
}

#[test]
fn ablate_writes_four_rows_in_order() {
    let ws = Workspace::new();
    let dir = ws.path("grid");
    let out = kldiff(&["ablate", "--config", s(&ws.path("tiny.cfg")), "--seed", "1", "--out", s(&dir)]);
    assert!(out.status.success(), "{out:?}");
    let csv = fs::read_to_string(dir.join("ablation.csv")).unwrap();
    let modes: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(modes, ["mode", "full", "no_llm", "no_kl", "neither"]);
    for m in ["full", "no_llm", "no_kl", "neither"] {
        assert!(dir.join(format!("{m}.ckpt")).exists());
        assert!(dir.join(format!("{m}.ckpt.history.csv")).exists());
    }
    let unseeded = kldiff(&["ablate", "--config", s(&ws.path("tiny.cfg")), "--out", s(&dir)]);
    assert_eq!(unseeded.status.code(), Some(2));
}

#[test]
fn errors_have_distinct_codes() {
    let ws = Workspace::new();
    let data = ws.data();
    let train_with = |cfg: &Path| {
        kldiff(&["train", "--config", s(cfg), "--dataset", s(&data), "--out", s(&ws.path("e.ckpt"))])
    };

    let missing = train_with(&ws.path("absent.cfg"));
    assert_eq!(missing.status.code(), Some(4));
    assert!(stderr_line(&missing).starts_with("error kind=missing_file"));

    let typo = ws.path("typo.cfg");
    fs::write(&typo, "train.epochz = 3\n").unwrap();
    let out = train_with(&typo);
    assert_eq!(out.status.code(), Some(5));
    assert!(stderr_line(&out).contains("line 1"));

    let bad_data = ws.path("bad.csv");
    fs::write(&bad_data, "shape,color,position,size\nblob,red,top-left,0\n").unwrap();
    let out = kldiff(&["train", "--dataset", s(&bad_data), "--out", s(&ws.path("e.ckpt"))]);
    assert_eq!(out.status.code(), Some(10));

    let good = fs::read(ws.trained()).unwrap();
    let eval_bytes = |name: &str, bytes: &[u8]| {
        let p = ws.path(name);
        fs::write(&p, bytes).unwrap();
        let out = kldiff(&["eval", "--checkpoint", s(&p), "--dataset", s(&data), "--seed", "0"]);
        stderr_line(&out);
        out.status.code()
    };
    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"NOPE");
    assert_eq!(eval_bytes("magic.ckpt", &magic), Some(6));
    let mut version = good.clone();
    version[4] = 9;
    assert_eq!(eval_bytes("version.ckpt", &version), Some(7));
    assert_eq!(eval_bytes("short.ckpt", &good[..good.len() / 3]), Some(8));
}

#[test]
fn library_round_trip_matches_binary_output() {
    let ws = Workspace::new();
    let ckpt = load_checkpoint(&ws.trained()).unwrap();
    let copy = ws.path("copy.ckpt");
    save_checkpoint(&copy, &ckpt).unwrap();
    assert_eq!(fs::read(&copy).unwrap(), fs::read(ws.trained()).unwrap());
}
