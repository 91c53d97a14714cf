use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus/sample.txt")
}

fn dmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    let text = format!(
        r#"seed = 5

[model]
n_layers = 2
n_heads = 2
d_model = 16
max_seq = 24

[data]
paths = ["{}"]
seq_len = 16
batch_size = 2
eval_sequences = 4

[pretrain]
steps = 12
warmup_steps = 2
eval_every = 6

[retrofit]
anneal_steps = 3

[dmc.schedule]
target_cr = 2.0
ramp_steps = 6
solidify_steps = 2

[bench]
batch = 2
prompt_len = 8
gen_len = 6
"#,
        corpus().display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_pipeline(config: &Path, out: &Path) {
    let base = out.join("base");
    let retro = out.join("retro");
    ok(&dmc(&["pretrain", "-c", s(config), "-o", s(&base)]));
    ok(&dmc(&["retrofit", "-c", s(config), "--base", s(&base.join("pretrain.ckpt")), "-o", s(&retro)]));
    let last = retro.join("retrofit-final.ckpt");
    ok(&dmc(&["analyze", "-c", s(config), "--checkpoint", s(&last), "-o", s(&out.join("analysis"))]));
    ok(&dmc(&["bench", "-c", s(config), "--checkpoint", s(&last), "-o", s(&out.join("bench"))]));
    let eval = ok(&dmc(&["eval", "-c", s(config), "--checkpoint", s(&last), "--mode", "dmc-infer-path"]));
    std::fs::write(out.join("eval.json"), eval).unwrap();
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(&config, &a);
    run_pipeline(&config, &b);
    let fa = files(&a);
    assert!(fa.len() >= 15, "{fa:?}");
    for f in fa {
        if f.file_name().unwrap() == "timing.csv" {
            continue;
        }
        let rel = f.strip_prefix(&a).unwrap();
        assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{}", rel.display());
    }
    let inspect = ok(&dmc(&["inspect-checkpoint", s(&a.join("retro/retrofit-final.ckpt"))]));
    assert!(inspect.contains("kind = \"compressed\""), "{inspect}");
    let generated = ok(&dmc(&[
        "generate",
        "--checkpoint",
        s(&a.join("base/pretrain.ckpt")),
        "--prompt",
        "ledger ",
        "--tokens",
        "5",
    ]));
    assert!(generated.starts_with("ledger "));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let code = |out: Output| out.status.code().unwrap();

    assert_eq!(code(dmc(&["pretrain", "-c", s(&config), "--set", "model.bogus=1", "-o", "x"])), 2);
    assert_eq!(code(dmc(&["pretrain", "-c", s(&config), "--set", "data.paths=[\"/nonexistent\"]", "-o", "x"])), 2);
    assert_eq!(code(dmc(&["pretrain", "--no-such-flag"])), 2);

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let set = format!("data.paths=[\"{}\"]", empty.display());
    assert_eq!(code(dmc(&["pretrain", "-c", s(&config), "--set", &set, "-o", s(&dir.path().join("o"))])), 3);

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"DMCCKPT\0garbage").unwrap();
    assert_eq!(code(dmc(&["inspect-checkpoint", s(&bad)])), 3);

    let out = dir.path().join("nan");
    let args = ["pretrain", "-c", s(&config), "--set", "optimizer.lr=1e30", "--set", "optimizer.grad_clip=0", "-o", s(&out)];
    let res = dmc(&args);
    assert_eq!(code(res), 4);
}
