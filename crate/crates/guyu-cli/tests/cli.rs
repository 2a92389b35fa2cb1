//! End-to-end tests spawning the built binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn guyu() -> Command {
    Command::new(env!("CARGO_BIN_EXE_guyu"))
}

fn write_toy_dialogues(path: &Path, repeats: usize) {
    let pairs = [
        ("hello there", "hello how are you"),
        ("how are you", "fine thanks"),
        ("good day", "nice to meet you"),
        ("see you later", "bye bye"),
        ("what is up", "not much"),
        ("fine thanks", "good good"),
    ];
    let mut lines = String::new();
    for i in 0..repeats {
        let (c, r) = pairs[i % pairs.len()];
        lines.push_str(&format!(
            "{{\"context\": [\"{c}\"], \"response\": \"{r}\"}}\n"
        ));
    }
    std::fs::write(path, lines).unwrap();
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_toy_dialogues(&dir.path().join("train.jsonl"), 120);
        write_toy_dialogues(&dir.path().join("test.jsonl"), 6);
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train_with(&self, out: &str, steps: &str, seed: &str) -> Output {
        let mut cmd = guyu();
        cmd.args([
            "train",
            "--corpus",
            self.path("train.jsonl").to_str().unwrap(),
            "--vocab",
            self.path("vocab.txt").to_str().unwrap(),
            "--build-vocab",
            "char",
            "--out",
            self.path(out).to_str().unwrap(),
            "--d-model",
            "32",
            "--layers",
            "1",
            "--heads",
            "2",
            "--steps",
            steps,
            "--warmup",
            "60",
            "--batch-size",
            "8",
            "--val-interval",
            "40",
            "--max-context",
            "32",
            "--max-response",
            "20",
            "--seed",
            seed,
        ]);
        cmd.env_remove("GUYU_SEED");
        cmd.output().unwrap()
    }

    fn train(&self, out: &str) -> Output {
        self.train_with(out, "160", "7")
    }
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_train_generate_evaluate() {
    let ws = Workspace::new();
    let out = ws.train("run");
    assert_ok(&out);
    assert!(ws.path("run/model.ckpt").exists());

    // stats report on stdout is schema-shaped JSON
    let stdout = String::from_utf8_lossy(&out.stdout);
    let stats: serde_json::Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    for key in [
        "split",
        "samples",
        "avg_context_turns",
        "avg_response_tokens",
    ] {
        assert!(stats.get(key).is_some(), "stats missing {key}");
    }
    assert_eq!(stats["samples"], 120);

    // the training log holds one JSON record per step
    let log = std::fs::read_to_string(ws.path("run/train_log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 160);
    assert!(records[0].get("lr").is_some());
    assert!(records.iter().any(|r| r.get("val_loss").is_some()));

    let generate = |out_dir: &str| -> Output {
        let out = guyu()
            .args([
                "generate",
                "--corpus",
                ws.path("test.jsonl").to_str().unwrap(),
                "--vocab",
                ws.path("vocab.txt").to_str().unwrap(),
                "--checkpoint",
                ws.path("run/model.ckpt").to_str().unwrap(),
                "--out",
                ws.path(out_dir).to_str().unwrap(),
                "--strategy",
                "tk",
                "--k",
                "8",
                "--copies",
                "4",
                "--max-new",
                "24",
                "--max-context",
                "32",
                "--seed",
                "3",
                "--dump",
                ws.path(&format!("{out_dir}/dump.jsonl")).to_str().unwrap(),
            ])
            .env_remove("GUYU_SEED")
            .output()
            .unwrap();
        assert_ok(&out);
        out
    };
    generate("gen");
    let hyps = std::fs::read_to_string(ws.path("gen/hyps.txt")).unwrap();
    let refs = std::fs::read_to_string(ws.path("gen/refs.txt")).unwrap();
    assert_eq!(hyps.lines().count(), 6, "one hypothesis per test sample");
    assert_eq!(refs.lines().count(), 6);

    // ranked dump: 4 candidates per sample with rank 0..3 and scores in (0,1]
    let dump = std::fs::read_to_string(ws.path("gen/dump.jsonl")).unwrap();
    let dump_records: Vec<serde_json::Value> = dump
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(dump_records.len(), 24);
    for r in &dump_records {
        let score = r["score"].as_f64().unwrap();
        assert!(score > 0.0 && score <= 1.0);
        assert!(r["rank"].as_u64().unwrap() < 4);
        assert!(r.get("text").is_some() && r.get("token_count").is_some());
    }

    // same seed reproduces the same hypotheses
    generate("gen2");
    let hyps2 = std::fs::read_to_string(ws.path("gen2/hyps.txt")).unwrap();
    assert_eq!(hyps, hyps2);

    let eval_out = guyu()
        .args([
            "evaluate",
            ws.path("gen/hyps.txt").to_str().unwrap(),
            ws.path("gen/refs.txt").to_str().unwrap(),
            "--metric-unit",
            "char",
            "--out",
            ws.path("report.json").to_str().unwrap(),
        ])
        .env_remove("GUYU_SEED")
        .output()
        .unwrap();
    assert_ok(&eval_out);
    let eval_stdout = String::from_utf8_lossy(&eval_out.stdout);
    let report: serde_json::Value =
        serde_json::from_str(eval_stdout.lines().next().unwrap()).unwrap();
    for key in [
        "bleu", "b1", "b2", "b3", "b4", "madist1", "madist2", "midist1", "midist2", "length",
        "pairs",
    ] {
        assert!(report.get(key).is_some(), "report missing {key}");
    }
    assert_eq!(report["pairs"], 6);
    // the table line shows percents
    assert!(eval_stdout.contains("BLEU"));
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("report.json")).unwrap()).unwrap();
    assert_eq!(written["pairs"], 6);

    // evaluating the dump file picks the rank-0 candidates
    let eval_dump = guyu()
        .args([
            "evaluate",
            ws.path("gen/dump.jsonl").to_str().unwrap(),
            ws.path("gen/refs.txt").to_str().unwrap(),
            "--metric-unit",
            "char",
        ])
        .env_remove("GUYU_SEED")
        .output()
        .unwrap();
    assert_ok(&eval_dump);
}

#[test]
fn error_lines_are_machine_parsable() {
    let ws = Workspace::new();
    // missing required path
    let out = guyu()
        .args(["generate"])
        .env_remove("GUYU_SEED")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    assert!(
        line.starts_with("error[E_CONFIG]:"),
        "unexpected error line: {line}"
    );

    // vocabulary hash mismatch is E_COMPAT
    assert_ok(&ws.train("run"));
    let mut vocab = std::fs::read_to_string(ws.path("vocab.txt")).unwrap();
    let next_id = vocab.lines().filter(|l| l.contains('\t')).count();
    vocab.push_str(&format!("zz\t{next_id}\n"));
    std::fs::write(ws.path("vocab2.txt"), vocab).unwrap();
    let out = guyu()
        .args([
            "generate",
            "--corpus",
            ws.path("test.jsonl").to_str().unwrap(),
            "--vocab",
            ws.path("vocab2.txt").to_str().unwrap(),
            "--checkpoint",
            ws.path("run/model.ckpt").to_str().unwrap(),
            "--out",
            ws.path("bad").to_str().unwrap(),
        ])
        .env_remove("GUYU_SEED")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr
            .lines()
            .last()
            .unwrap()
            .starts_with("error[E_COMPAT]:"),
        "stderr: {stderr}"
    );

    // malformed corpus line is E_CORPUS and names the line
    std::fs::write(
        ws.path("broken.jsonl"),
        "{\"context\": [\"a\"], \"response\": \"b\"}\nnot json\n",
    )
    .unwrap();
    let out = guyu()
        .args([
            "train",
            "--corpus",
            ws.path("broken.jsonl").to_str().unwrap(),
            "--vocab",
            ws.path("vocab.txt").to_str().unwrap(),
            "--out",
            ws.path("x").to_str().unwrap(),
        ])
        .env_remove("GUYU_SEED")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    assert!(
        line.starts_with("error[E_CORPUS]:") && line.contains("line 2"),
        "{line}"
    );
}

#[test]
fn guyu_seed_env_overrides_flag() {
    let ws = Workspace::new();
    assert_ok(&ws.train_with("a", "30", "1"));
    let base = std::fs::read(ws.path("a/model.ckpt")).unwrap();

    // flag says 1 but the env var forces 2
    let out = guyu()
        .args([
            "train",
            "--corpus",
            ws.path("train.jsonl").to_str().unwrap(),
            "--vocab",
            ws.path("vocab.txt").to_str().unwrap(),
            "--out",
            ws.path("b").to_str().unwrap(),
            "--d-model",
            "32",
            "--layers",
            "1",
            "--heads",
            "2",
            "--steps",
            "30",
            "--warmup",
            "60",
            "--batch-size",
            "8",
            "--val-interval",
            "40",
            "--max-context",
            "32",
            "--max-response",
            "20",
            "--seed",
            "1",
        ])
        .env("GUYU_SEED", "2")
        .output()
        .unwrap();
    assert_ok(&out);
    let forced = std::fs::read(ws.path("b/model.ckpt")).unwrap();
    assert_ne!(base, forced, "GUYU_SEED must override --seed");

    // same seed via flag reproduces byte-identical checkpoints
    assert_ok(&ws.train_with("c", "30", "1"));
    let again = std::fs::read(ws.path("c/model.ckpt")).unwrap();
    assert_eq!(base, again);
}

#[test]
fn config_file_resolution_flags_win() {
    let ws = Workspace::new();
    std::fs::write(
        ws.path("guyu.conf"),
        format!(
            "# toy config\ncorpus = {}\nvocab = {}\nsteps = 25\nd-model = 32\nlayers = 1\nheads = 2\nwarmup = 60\nbatch-size = 8\nval-interval = 40\nmax-context = 32\nmax-response = 20\nseed = 7\n",
            ws.path("train.jsonl").display(),
            ws.path("vocab.txt").display()
        ),
    )
    .unwrap();
    let out = guyu()
        .args([
            "train",
            "--config",
            ws.path("guyu.conf").to_str().unwrap(),
            "--build-vocab",
            "char",
            "--out",
            ws.path("cfg").to_str().unwrap(),
            "--steps",
            "12",
        ])
        .env_remove("GUYU_SEED")
        .output()
        .unwrap();
    assert_ok(&out);
    let log = std::fs::read_to_string(ws.path("cfg/train_log.jsonl")).unwrap();
    assert_eq!(
        log.lines().count(),
        12,
        "--steps flag must beat the config file"
    );
}

#[test]
fn botchat_and_chat_sessions() {
    let ws = Workspace::new();
    assert_ok(&ws.train("run"));

    let out = guyu()
        .args([
            "botchat",
            "--vocab",
            ws.path("vocab.txt").to_str().unwrap(),
            "--checkpoint",
            ws.path("run/model.ckpt").to_str().unwrap(),
            "--query",
            "hello there",
            "--turns",
            "4",
            "--window",
            "24",
            "--strategy",
            "tk",
            "--k",
            "4",
            "--copies",
            "2",
            "--max-new",
            "12",
            "--seed",
            "5",
            "--out",
            ws.path("transcript.json").to_str().unwrap(),
        ])
        .env_remove("GUYU_SEED")
        .output()
        .unwrap();
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    let speakers: Vec<&str> = stdout
        .lines()
        .filter(|l| l.starts_with("Bot-"))
        .map(|l| l.split(':').next().unwrap())
        .collect();
    assert_eq!(speakers, ["Bot-A", "Bot-B", "Bot-A", "Bot-B", "Bot-A"]);
    let transcript: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("transcript.json")).unwrap())
            .unwrap();
    assert_eq!(transcript["turns"].as_array().unwrap().len(), 5);

    // REPL: single exchange, /reset, /quit
    use std::io::Write;
    use std::process::Stdio;
    let mut child = guyu()
        .args([
            "chat",
            "--vocab",
            ws.path("vocab.txt").to_str().unwrap(),
            "--checkpoint",
            ws.path("run/model.ckpt").to_str().unwrap(),
            "--window",
            "24",
            "--strategy",
            "greedy",
            "--copies",
            "2",
            "--max-new",
            "12",
        ])
        .env_remove("GUYU_SEED")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    child
        .stdin
        .as_mut()
        .unwrap()
        .write_all(b"hello there\n/reset\nhow are you\n/quit\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("bot ["), "no bot reply in {stdout}");
    assert!(stdout.contains("(memory cleared)"));
}
