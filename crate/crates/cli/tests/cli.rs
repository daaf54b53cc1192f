use std::path::Path;
use std::process::{Command, Output};

fn bitrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitrec")).current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &[&str] = &["--synthetic.users", "40", "--synthetic.items", "30", "--synthetic.mean_length", "8"];

#[test]
fn synthetic_data_is_a_function_of_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |out: &str, seed: &str| {
        let mut args = vec!["gen-synthetic", "--out", out, "--seed", seed];
        args.extend_from_slice(SMALL);
        let o = bitrec(dir.path(), &args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(dir.path().join(out).join("interactions.tsv")).unwrap()
    };
    let a = gen("a", "3");
    assert_eq!(a, gen("b", "3"));
    assert_ne!(a, gen("c", "4"));
    assert!(dir.path().join("a/catalog.tsv").exists());
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = bitrec(dir.path(), &["grad-check"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "model.d = 32\nmodel.heads = 4 # comment\n").unwrap();
    let o = bitrec(dir.path(), &["grad-check", "--config", "run.cfg", "--model.d", "64", "--gradcheck.coordinates=5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("model.d = 64\n"));
    assert!(text.contains("model.heads = 4\n"));
    assert!(text.contains("model.layers = 2\n"));
    assert!(text.contains("over 5 coordinates"));
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = bitrec(dir.path(), &["train", "--model.width", "3"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown config key `model.width`"));

    let o = bitrec(dir.path(), &["frobnicate"]);
    assert!(!o.status.success());

    let o = bitrec(dir.path(), &["train"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no dataset"));

    std::fs::write(dir.path().join("bad.cfg"), "model.d = 8\nnonsense\n").unwrap();
    let o = bitrec(dir.path(), &["grad-check", "--config", "bad.cfg"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.cfg:2"));
}

#[test]
fn train_then_eval_and_predict_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen-synthetic", "--out", "data"];
    args.extend_from_slice(SMALL);
    assert!(bitrec(dir.path(), &args).status.success());
    let model = [
        "--dataset",
        "data/interactions.tsv",
        "--catalog",
        "data/catalog.tsv",
        "--model.d",
        "8",
        "--model.max_len",
        "10",
        "--model.layers",
        "1",
        "--train.epochs",
        "1",
        "--train.negatives",
        "8",
    ];
    let mut args = vec!["train", "--out", "run"];
    args.extend_from_slice(&model);
    let o = bitrec(dir.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trained = std::fs::read_to_string(dir.path().join("run/train_report.tsv")).unwrap();

    let o = bitrec(dir.path(), &["eval", "--config", "run/config.cfg", "--out", "ev"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let evaluated = std::fs::read_to_string(dir.path().join("ev/eval_report.tsv")).unwrap();
    assert_eq!(trained, evaluated);

    let o = bitrec(dir.path(), &["predict", "--config", "run/config.cfg", "--run.user", "u0", "--run.top_k", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 3);
    assert_eq!(text.lines().filter(|l| l.starts_with("behavior\t")).count(), 4);
}
