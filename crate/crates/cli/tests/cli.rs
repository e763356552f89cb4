use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn mad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mad"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mad(args);
    assert!(
        out.status.success(),
        "mad {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    models: Vec<String>,
}

impl Fixture {
    fn new(models: &[(&str, f64)], images: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let spec: Vec<String> = models.iter().map(|(m, e)| format!("{m}={e}")).collect();
        ok(&[
            "synth",
            "--out",
            root.join("fx").to_str().unwrap(),
            "--models",
            &spec.join(","),
            "--images",
            &images.to_string(),
            "--seed",
            "3",
            "--nonnatural-rate",
            "0.02",
        ]);
        Self {
            _dir: dir,
            root,
            models: models.iter().map(|(m, _)| m.to_string()).collect(),
        }
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_str().unwrap().to_string()
    }

    fn taxonomy(&self) -> String {
        self.path("fx/taxonomy.txt")
    }

    fn oracle(&self) -> String {
        self.path("fx/oracle.txt")
    }

    fn predictions(&self, models: &[String]) -> Vec<String> {
        models
            .iter()
            .map(|m| self.path(&format!("fx/predictions/{m}.txt")))
            .collect()
    }
}

fn with_predictions<'a>(mut args: Vec<&'a str>, preds: &'a [String]) -> Vec<&'a str> {
    args.push("--predictions");
    args.extend(preds.iter().map(String::as_str));
    args
}

/// Every regular file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn four() -> Fixture {
    Fixture::new(&[("a", 0.05), ("b", 0.1), ("c", 0.2), ("d", 0.4)], 4_000)
}

#[test]
fn run_equals_staged_and_reruns_are_identical() {
    let f = four();
    let (tax, orc) = (f.taxonomy(), f.oracle());
    let preds = f.predictions(&f.models);
    let (staged, whole) = (f.path("staged"), f.path("whole"));

    ok(&with_predictions(
        vec!["select", "--taxonomy", &tax, "--out", &staged],
        &preds,
    ));
    ok(&["label", "--taxonomy", &tax, "--oracle", &orc, "--out", &staged]);
    let ranked = ok(&["rank", "--out", &staged]);
    ok(&with_predictions(
        vec!["run", "--taxonomy", &tax, "--oracle", &orc, "--out", &whole],
        &preds,
    ));
    let first = snapshot(Path::new(&staged));
    assert_eq!(first, snapshot(Path::new(&whole)));
    assert_eq!(first.len(), 4 + 6);

    let order: Vec<String> = String::from_utf8(ranked.stdout)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().nth(1).unwrap().to_string())
        .collect();
    assert_eq!(order, ["a", "b", "c", "d"]);

    // Deleting downstream outputs and rerunning reproduces them.
    std::fs::remove_file(Path::new(&staged).join("verdicts.csv")).unwrap();
    std::fs::remove_file(Path::new(&staged).join("ranking.txt")).unwrap();
    ok(&["label", "--taxonomy", &tax, "--oracle", &orc, "--out", &staged]);
    ok(&["rank", "--out", &staged]);
    assert_eq!(snapshot(Path::new(&staged)), first);

    ok(&with_predictions(
        vec![
            "--sequential",
            "run",
            "--taxonomy",
            &tax,
            "--oracle",
            &orc,
            "--out",
            &staged,
        ],
        &preds,
    ));
    assert_eq!(snapshot(Path::new(&staged)), first);
}

#[test]
fn manifest_per_pair() {
    let names: Vec<String> = (0..11).map(|i| format!("m{i:02}")).collect();
    let models: Vec<(&str, f64)> = names
        .iter()
        .enumerate()
        .map(|(i, m)| (m.as_str(), 0.05 + 0.03 * i as f64))
        .collect();
    let f = Fixture::new(&models, 2_000);
    let tax = f.taxonomy();
    let out = f.path("out");
    let preds = f.predictions(&f.models);
    ok(&with_predictions(
        vec!["select", "--taxonomy", &tax, "--out", &out],
        &preds,
    ));
    let manifests = std::fs::read_dir(Path::new(&out).join("manifests")).unwrap().count();
    assert_eq!(manifests, 55);

    // Narrowing to two models leaves exactly one manifest.
    ok(&with_predictions(
        vec!["select", "--taxonomy", &tax, "--out", &out],
        &preds[..2],
    ));
    let left: Vec<String> = std::fs::read_dir(Path::new(&out).join("manifests"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(left, ["m00__m01.csv"]);
}

#[test]
fn failures_name_the_stage() {
    let f = four();
    let out = f.path("out");
    let tax = f.taxonomy();

    let e = mad(&[
        "select",
        "--taxonomy",
        "/nonexistent/tax.txt",
        "--predictions",
        "x.txt",
        "--out",
        &out,
    ]);
    assert!(!e.status.success());
    assert!(stderr(&e).starts_with("mad: select:"), "{}", stderr(&e));

    let e = mad(&["label", "--taxonomy", &tax, "--oracle", &f.oracle(), "--out", &out]);
    assert!(!e.status.success());
    assert!(stderr(&e).starts_with("mad: label:"), "{}", stderr(&e));

    let e = mad(&["rank", "--out", &out]);
    assert!(stderr(&e).starts_with("mad: rank:"), "{}", stderr(&e));

    let e = mad(&["select", "--out", &out]);
    assert!(stderr(&e).contains("missing --taxonomy"), "{}", stderr(&e));
    assert!(stderr(&e).starts_with("mad: select:"));

    let preds = f.predictions(&f.models);
    ok(&with_predictions(
        vec!["select", "--taxonomy", &tax, "--out", &out],
        &preds,
    ));
    let e = mad(&[
        "label",
        "--taxonomy",
        &tax,
        "--oracle",
        &f.oracle(),
        "--out",
        &out,
        "--k",
        "10",
    ]);
    assert!(stderr(&e).contains("--k 10 disagrees"), "{}", stderr(&e));

    let e = mad(&with_predictions(
        vec![
            "select",
            "--taxonomy",
            &tax,
            "--out",
            &out,
            "--confidence-threshold",
            "1.5",
        ],
        &preds,
    ));
    assert!(!e.status.success());
}

#[test]
fn config_file_fills_flags_and_flags_win() {
    let f = four();
    let cfg = f.root.join("mad.toml");
    std::fs::write(
        &cfg,
        "taxonomy = \"fx/taxonomy.txt\"\noracle = \"fx/oracle.txt\"\nout = \"cfg-out\"\nk = 7\n\
         predictions = [\"fx/predictions/a.txt\", \"fx/predictions/b.txt\", \"fx/predictions/c.txt\"]\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    ok(&["--config", cfg, "run", "--k", "9"]);
    let sel = std::fs::read_to_string(f.root.join("cfg-out/selection.toml")).unwrap();
    assert!(sel.starts_with("k = 9\n"), "{sel}");
    let models = std::fs::read_to_string(f.root.join("cfg-out/models.txt")).unwrap();
    assert_eq!(models, "a\nb\nc\n");
    ok(&["--config", cfg, "stability", "--k", "9"]);
    let csv = std::fs::read_to_string(f.root.join("cfg-out/stability.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("k,srcc"));
    // One row per k' below the reference k.
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(csv.lines().last().unwrap().starts_with("8,"));
}

#[test]
fn add_model_matches_scratch_run() {
    let f = four();
    let (tax, orc) = (f.taxonomy(), f.oracle());
    let (inc, scratch) = (f.path("inc"), f.path("scratch"));
    let all = f.predictions(&f.models);
    ok(&with_predictions(
        vec!["run", "--taxonomy", &tax, "--oracle", &orc, "--out", &inc],
        &all[..3],
    ));
    ok(&["stability", "--out", &inc]);
    // The new model may be listed anywhere among the prediction files.
    let shuffled = vec![all[3].clone(), all[1].clone(), all[0].clone(), all[2].clone()];
    let added = ok(&with_predictions(
        vec!["add-model", "--taxonomy", &tax, "--oracle", &orc, "--out", &inc],
        &shuffled,
    ));
    assert!(stderr(&added).contains("added d"));
    ok(&with_predictions(
        vec!["run", "--taxonomy", &tax, "--oracle", &orc, "--out", &scratch],
        &all,
    ));

    let (a, b) = (snapshot(Path::new(&inc)), snapshot(Path::new(&scratch)));
    assert!(!a.contains_key(Path::new("stability.csv")));
    for file in ["models.txt", "verdicts.csv", "selection.toml"] {
        assert_eq!(a[Path::new(file)], b[Path::new(file)], "{file}");
    }
    for (path, bytes) in &b {
        if path.starts_with("manifests") {
            assert_eq!(&a[path], bytes, "{}", path.display());
        }
    }
    let line = |snap: &BTreeMap<PathBuf, Vec<u8>>, key: &str| {
        String::from_utf8(snap[Path::new("ranking.txt")].clone())
            .unwrap()
            .lines()
            .find(|l| l.starts_with(key))
            .unwrap()
            .to_string()
    };
    assert_eq!(line(&a, "rank ="), line(&b, "rank ="));
    assert_eq!(line(&a, "r ="), line(&b, "r ="));

    // A second new model at once is refused.
    let e = mad(&with_predictions(
        vec![
            "add-model",
            "--taxonomy",
            &tax,
            "--oracle",
            &orc,
            "--out",
            &f.path("inc2"),
        ],
        &all,
    ));
    assert!(stderr(&e).starts_with("mad: add-model:"));
}

fn http(addr: &str, request: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(request.as_bytes()).unwrap();
    let mut body = String::new();
    s.read_to_string(&mut body).unwrap();
    body
}

#[test]
fn serve_answers_http_and_survives_restart() {
    let f = four();
    let (tax, out) = (f.taxonomy(), f.path("out"));
    let preds = f.predictions(&f.models);
    ok(&with_predictions(
        vec!["select", "--taxonomy", &tax, "--out", &out],
        &preds,
    ));

    let start = || {
        let mut child = Command::new(env!("CARGO_BIN_EXE_mad"))
            .args(["serve", "--taxonomy", &tax, "--out", &out, "--listen", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on http://")
            .expect(&line)
            .to_string();
        (child, addr)
    };

    let (mut child, addr) = start();
    let next = http(&addr, "GET /api/next?annotator=ann HTTP/1.0\r\n\r\n");
    assert!(next.starts_with("HTTP/1.0 200"), "{next}");
    let body = next.split("\r\n\r\n").nth(1).unwrap();
    let image = body.split("\"image_id\":\"").nth(1).unwrap().split('"').next().unwrap();
    let vote = format!(
        "{{\"annotator\":\"ann\",\"image_id\":\"{image}\",\"answer_a\":true,\"answer_b\":false,\"difficulty\":false}}"
    );
    let req = format!(
        "POST /api/vote HTTP/1.0\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{vote}",
        vote.len()
    );
    assert!(http(&addr, &req).starts_with("HTTP/1.0 200"));
    assert!(http(&addr, &req).starts_with("HTTP/1.0 409"));
    child.kill().unwrap();
    child.wait().unwrap();

    let log = std::fs::read_to_string(Path::new(&out).join("session.log")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let (mut child, addr) = start();
    let progress = http(&addr, "GET /api/progress HTTP/1.0\r\n\r\n");
    assert!(progress.contains("\"votes\":1"), "{progress}");
    let ranking = http(&addr, "GET /api/ranking HTTP/1.0\r\n\r\n");
    assert!(ranking.contains("\"partial\":true"), "{ranking}");
    child.kill().unwrap();
    child.wait().unwrap();
}
