use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vocl_core::eval::EvalReport;
use vocl_core::fixture::{write_synthetic_corpus, CorpusSpec};
use vocl_core::{ClMode, TrainConfig};

fn vocl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vocl")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(n_clips: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_corpus(&dir.path().join("corpus"), &CorpusSpec::small(n_clips)).unwrap();
        Self { dir }
    }

    fn corpus(&self) -> PathBuf {
        self.dir.path().join("corpus")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Tiny training run over the fixture, returning the run directory.
    fn train(&self, name: &str, extra: &[&str]) -> (Output, PathBuf) {
        let out = self.path(name);
        let tiny = configs_dir().join("tiny.toml");
        let corpus_set = format!("corpus_dir={}", s(&self.corpus()));
        let out_set = format!("out_dir={}", s(&out));
        let mut args = vec!["train", "--config", s(&tiny), "--set", &corpus_set, "--set", &out_set, "--log-every", "0"];
        args.extend_from_slice(extra);
        (vocl(&args), out)
    }
}

#[test]
fn shipped_configs_validate_and_match_the_presets() {
    let desk = TrainConfig::load(&configs_dir().join("desk.toml"), &[]).unwrap();
    assert_eq!(
        desk,
        TrainConfig {
            out_dir: "runs/desk-mel_wave".into(),
            ..TrainConfig::desk()
        }
    );
    let tiny = TrainConfig::load(&configs_dir().join("tiny.toml"), &[]).unwrap();
    assert_eq!(
        tiny,
        TrainConfig {
            corpus_dir: "data/tiny".into(),
            out_dir: "runs/tiny".into(),
            record_wallclock: false,
            ..TrainConfig::tiny()
        }
    );
    for f in ["desk.toml", "tiny.toml"] {
        let o = vocl(&["validate-config", "--config", s(&configs_dir().join(f))]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("# resolved config"));
    }
}

#[test]
fn invalid_configs_exit_3_and_name_the_invariant() {
    let desk = configs_dir().join("desk.toml");
    let o = vocl(&["validate-config", "--config", s(&desk), "--set", "batch_size=1"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("batch_size >= 2"), "{}", stderr(&o));

    let o = vocl(&["validate-config", "--config", s(&desk), "--set", "batch_size=1", "--set", "loss_weights.cl_mode=none"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = vocl(&["validate-config", "--config", s(&desk), "--set", "no_such_key=1"]);
    assert_eq!(code(&o), 3);
    let o = vocl(&["validate-config", "--config", s(&desk), "--set", "loss_weights.cl_mode=sideways"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn missing_files_exit_2() {
    let f = Fixture::new(3);
    let o = vocl(&["validate-config", "--config", s(&f.path("absent.toml"))]);
    assert_eq!(code(&o), 2);
    let o = vocl(&["prepare", "--corpus", s(&f.path("nowhere"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn prepare_reports_the_corpus_and_dumps_the_filterbank() {
    let f = Fixture::new(3);
    let o = vocl(&["prepare", "--corpus", s(&f.corpus()), "--out", s(&f.path("fb"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("3 clips"));
    assert_eq!(fs::read_dir(f.path("fb")).unwrap().count(), 2);
}

fn subset(f: &Fixture, fraction: &str, seed: &str, out: &str) -> (Output, Vec<String>) {
    let path = f.path(out);
    let o = vocl(&[
        "subset",
        "--corpus",
        s(&f.corpus()),
        "--fraction",
        fraction,
        "--seed",
        seed,
        "--out",
        s(&path),
        "--validation-count",
        "4",
    ]);
    let lines = fs::read_to_string(&path)
        .map(|t| t.lines().map(str::to_owned).collect())
        .unwrap_or_default();
    (o, lines)
}

#[test]
fn subset_manifests_are_deterministic_and_nested() {
    let f = Fixture::new(54);
    let (o, full) = subset(&f, "1.0", "3", "full.txt");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(full.len(), 50);
    assert!(full.windows(2).all(|w| w[0] < w[1]));
    let (_, half) = subset(&f, "0.5", "3", "half.txt");
    let (_, half_again) = subset(&f, "0.5", "3", "half2.txt");
    let (_, tenth) = subset(&f, "0.1", "3", "tenth.txt");
    assert_eq!(half, half_again);
    assert_eq!((half.len(), tenth.len()), (25, 5));
    assert!(tenth.iter().all(|id| half.contains(id)));
    assert!(half.iter().all(|id| full.contains(id)));
    let (_, other_seed) = subset(&f, "0.5", "4", "other.txt");
    assert_ne!(half, other_seed);

    let (o, _) = subset(&f, "1.5", "3", "bad.txt");
    assert_eq!(code(&o), 3);
}

#[test]
fn eval_without_a_checkpoint_writes_nothing() {
    let f = Fixture::new(4);
    let out = f.path("eval");
    let o = vocl(&["eval", "--ckpt", s(&f.path("missing.bin")), "--corpus", s(&f.corpus()), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.join("report.csv").exists() && !out.join("report.json").exists());
}

#[test]
fn ground_truth_eval_is_zero_on_every_clip() {
    let f = Fixture::new(6);
    let out = f.path("gt");
    let o = vocl(&[
        "eval",
        "--ground-truth",
        "--corpus",
        s(&f.corpus()),
        "--out",
        s(&out),
        "--validation-count",
        "3",
        "--dump-mels",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = EvalReport::read_json(&out.join("report.json")).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.mae == 0.0 && r.mcd_db == 0.0));
    assert_eq!(fs::read_dir(out.join("mels")).unwrap().count(), 6);
}

fn metrics_column(run: &Path, column: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(run.join("metrics.csv")).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == column).unwrap();
    r.records()
        .map(|rec| rec.unwrap())
        .filter(|rec| &rec[0] == "train")
        .map(|rec| rec[idx].to_string())
        .collect()
}

#[test]
fn short_runs_in_every_mode_train_evaluate_and_synthesize() {
    let f = Fixture::new(6);
    for mode in ClMode::ALL {
        let mode_set = format!("loss_weights.cl_mode={mode}");
        let (o, run) = f.train(mode.as_str(), &["--set", &mode_set, "--set", "total_steps=3"]);
        assert_eq!(code(&o), 0, "{mode}: {}", stderr(&o));
        let resolved = TrainConfig::load(&run.join("config.resolved.toml"), &[]).unwrap();
        assert_eq!(resolved.loss_weights.cl_mode, mode);
        let l_cl = metrics_column(&run, "l_cl");
        assert_eq!(l_cl.len(), 3);
        if mode == ClMode::None {
            assert!(l_cl.iter().all(|v| v.parse::<f64>().unwrap() == 0.0), "{l_cl:?}");
        } else {
            assert!(l_cl.iter().all(|v| v.parse::<f64>().unwrap() > 0.0), "{l_cl:?}");
        }
        assert!(!run.join(".vocl.lock").exists());
    }

    let run = f.path("mel_wave");
    let ckpt = run.join("ckpt_3.bin");
    assert!(ckpt.is_file());
    let eval_out = f.path("eval");
    let o = vocl(&["eval", "--ckpt", s(&ckpt), "--corpus", s(&f.corpus()), "--out", s(&eval_out), "--dump-mels"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = EvalReport::read_json(&eval_out.join("report.json")).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.mae > 0.0));
    assert_eq!(fs::read_dir(eval_out.join("wavs")).unwrap().count(), 2);

    let synth_out = f.path("synth");
    let o = vocl(&["synth", "--ckpt", s(&ckpt), "--input", s(&eval_out.join("mels")), "--out", s(&synth_out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_dir(&synth_out).unwrap().count(), 4);

    let (o, _) = f.train("mel_wave", &["--set", "total_steps=5", "--resume", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(metrics_column(&run, "step"), ["1", "2", "3", "4", "5"]);
}

#[test]
fn a_locked_run_directory_is_refused() {
    let f = Fixture::new(6);
    let run = f.path("locked");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join(".vocl.lock"), "1").unwrap();
    let (o, _) = f.train("locked", &["--set", "total_steps=1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lock"), "{}", stderr(&o));
}

#[test]
fn diverging_training_aborts_with_exit_1() {
    let f = Fixture::new(6);
    let (o, run) = f.train("diverge", &["--set", "learning_rate=1e30", "--set", "total_steps=50"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("abort.json")).unwrap()).unwrap();
    assert!(dump["term"].is_string());
    assert_eq!(dump["clip_ids"].as_array().unwrap().len(), TrainConfig::tiny().batch_size);
}
