mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::TINY_RUN;
use rhm_lab::config::RunConfig;
use rhm_lab::grammar::{read_grammar, sample_grammar};

fn rhm_lab(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rhm-lab"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn setup(text: &str) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, text).unwrap();
    let out = tmp.path().join("out");
    (tmp, config, out)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn grammar_files_are_reproducible_and_protected() {
    let (_tmp, config, out) = setup(TINY_RUN);
    let first = rhm_lab(&["gen-grammar"], &config, &out);
    assert!(first.status.success(), "{}", stderr(&first));
    let a = std::fs::read(out.join("grammar.txt")).unwrap();

    let again = rhm_lab(&["gen-grammar"], &config, &out);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));

    let forced = rhm_lab(&["gen-grammar", "--force"], &config, &out);
    assert!(forced.status.success());
    assert_eq!(std::fs::read(out.join("grammar.txt")).unwrap(), a);

    let cfg = RunConfig::from_toml(TINY_RUN).unwrap();
    let reloaded = read_grammar(std::io::BufReader::new(&a[..])).unwrap();
    assert_eq!(reloaded, sample_grammar(&cfg.grammar).unwrap());

    let echoed = RunConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(echoed.grammar, cfg.grammar);
    assert_eq!(echoed.train, cfg.train);
    assert_eq!(echoed.model, cfg.model);
}

#[test]
fn impossible_grammar_is_a_usage_error() {
    let text = TINY_RUN.replace("v = 4\nm = 2", "v = 2\nm = 5");
    let (_tmp, config, out) = setup(&text);
    let o = rhm_lab(&["gen-grammar"], &config, &out);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: "));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let text = TINY_RUN.replace("batch = 4", "batch = 4\nbatch_size = 4");
    let (_tmp, config, out) = setup(&text);
    assert_eq!(rhm_lab(&["gen-grammar"], &config, &out).status.code(), Some(2));
}

#[test]
fn full_run_writes_every_table() {
    let (_tmp, config, out) = setup(TINY_RUN);
    let o = rhm_lab(&["run"], &config, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in [
        "metrics.csv",
        "oracle.csv",
        "specialization.csv",
        "pca.csv",
        "clusters.csv",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let header = |name: &str| {
        std::fs::read_to_string(out.join(name))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(header("metrics.csv"), rhm_lab::train::METRICS_HEADER);
    assert_eq!(header("oracle.csv"), rhm_lab::train::METRICS_HEADER);
    assert_eq!(header("specialization.csv"), "step,layer,head,condition,score");

    // 6 checkpoints x 1 layer x 2 heads x 4 conditions
    let spec = std::fs::read_to_string(out.join("specialization.csv")).unwrap();
    assert_eq!(spec.lines().count() - 1, 6 * 2 * 4);
    for line in spec.lines().skip(1) {
        let score: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&score));
    }

    // evaluations at two context sizes land on separate rows
    for n_ct in ["0", "2"] {
        let o = rhm_lab(
            &["eval", "--checkpoint", "23", "--condition", "ind", "--n-ct", n_ct],
            &config,
            &out,
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let eval = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    let rows: Vec<Vec<&str>> = eval.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][1], rows[0][2]), ("ind", "0"));
    assert_eq!((rows[1][1], rows[1][2]), ("ind", "2"));

    let missing = rhm_lab(&["eval", "--checkpoint", "7"], &config, &out);
    assert_eq!(missing.status.code(), Some(3));
    assert!(stderr(&missing).contains("ckpt_000000007.bin"), "{}", stderr(&missing));
}

#[test]
fn a_run_directory_belongs_to_one_run() {
    let (_tmp, config, out) = setup(TINY_RUN);
    assert!(rhm_lab(&["gen-grammar"], &config, &out).status.success());
    let other = TINY_RUN.replace("run_id = \"tiny\"", "run_id = \"other\"");
    std::fs::write(&config, other).unwrap();
    let o = rhm_lab(&["gen-grammar", "--force"], &config, &out);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
