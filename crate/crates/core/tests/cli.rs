use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::Duration;

use syntrace::datagen::{read_samples, Role};
use syntrace::syntax::{matches, SyntacticTemplate};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_syntrace"));
    c.env_remove("SYNTRACE_GEN_URL");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/fixture_corpus.txt")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn mine_lists_the_planted_trigger_first() {
    let out = run(&["mine", "--corpus", s(&fixture()), "--top", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let first = text.lines().nth(1).unwrap();
    assert!(first.ends_with("(DET)(NOUN)(ADP)(DET)(NOUN)(VERB)(ADP)(NOUN)"), "{text}");
    assert!(first.split_whitespace().nth(1) == Some("1"), "{text}");
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    assert_eq!(run(&["build-dataset", "--bogus", "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let missing = dir.path().join("missing.txt");
    assert_eq!(run(&["mine", "--corpus", s(&missing)]).status.code(), Some(2));

    let garbage = dir.path().join("garbage.jsonl");
    std::fs::write(&garbage, "{not json\n").unwrap();
    assert_eq!(
        run(&["augment", "--in", s(&garbage), "--out", s(&out)]).status.code(),
        Some(2)
    );
    assert!(!out.exists());
}

#[test]
fn gen_build_augment_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let bd = dir.path().join("bd.jsonl");
    let aug = dir.path().join("aug.jsonl");
    assert_eq!(run(&["gen", "--count", "12", "--out", s(&bd)]).status.code(), Some(0));
    assert_eq!(run(&["augment", "--in", s(&bd), "--out", s(&aug)]).status.code(), Some(0));
    let trig = SyntacticTemplate::default_trigger();
    let backdoor = read_samples(BufReader::new(std::fs::File::open(&bd).unwrap())).unwrap();
    let benign = read_samples(BufReader::new(std::fs::File::open(&aug).unwrap())).unwrap();
    assert_eq!(backdoor.len(), 12);
    assert_eq!(benign.len(), 12);
    assert!(backdoor.iter().all(|x| x.role == Role::Backdoor && matches(&x.tagged(), &trig)));
    assert!(benign.iter().all(|x| x.role == Role::Benign && !matches(&x.tagged(), &trig)));
    // the config echo is the first line of every sample file
    let head = std::fs::read_to_string(&bd).unwrap();
    assert!(head.starts_with("{\"config\""));
}

#[test]
fn killed_training_leaves_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds.jsonl");
    let run_dir = dir.path().join("run");
    assert_eq!(run(&["build-dataset", "--out", s(&ds)]).status.code(), Some(0));
    let mut child = bin()
        .args(["train", "--data", s(&ds), "--out", s(&run_dir), "--progress", "0"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    thread::sleep(Duration::from_millis(1500));
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(!run_dir.join("checkpoint.json").exists());
    assert!(!run_dir.join("train_log.jsonl").exists());
}

/// Serves `replies` in order, one JSON body per HTTP request, then stops.
fn mock_backend(replies: Vec<&'static str>) -> (String, thread::JoinHandle<usize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut served = 0;
        for body in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut req = vec![0u8; len];
            reader.read_exact(&mut req).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&req).unwrap();
            assert!(req["n"].as_u64().unwrap() >= 1);
            assert_eq!(req["template"].as_array().unwrap().len(), 8);
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            served += 1;
        }
        served
    });
    (url, handle)
}

#[test]
fn gen_filters_candidates_from_an_http_backend() {
    let (url, server) = mock_backend(vec![
        r#"{"candidates": ["a cat sleeps", "the dog near the river runs near park"]}"#,
        r#"{"candidates": ["the cat near the lake runs near park"]}"#,
    ]);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bd.jsonl");
    let o = run(&["gen", "--count", "2", "--backend", &url, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(server.join().unwrap(), 2);
    let got = read_samples(BufReader::new(std::fs::File::open(&out).unwrap())).unwrap();
    let texts: Vec<&str> = got.iter().map(|x| x.text.as_str()).collect();
    assert_eq!(texts, ["the dog near the river runs near park", "the cat near the lake runs near park"]);
}

#[test]
fn gen_budget_and_backend_failures_are_runtime_errors() {
    let (url, server) = mock_backend(vec![r#"{"candidates": ["a cat sleeps", "a dog runs"]}"#]);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bd.jsonl");
    let o = run(&["gen", "--count", "1", "--budget", "2", "--backend", &url, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    server.join().unwrap();
    assert!(!out.exists());

    // nothing listens on a port we just released
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dead = format!("http://127.0.0.1:{port}/generate");
    let o = run(&["gen", "--count", "1", "--backend", &dead, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}
