//! Compiles a C program against the generated header, links it with the
//! static library and runs it on a real checkpoint.

use std::path::PathBuf;
use std::process::Command;

use dmc_core::dmc::DmcVariant;
use dmc_core::harness::checkpoint::{round_weights, AttentionSpec, Checkpoint, TrainingState};
use dmc_core::model::{Model, ModelConfig};

fn static_lib() -> PathBuf {
    // Integration tests live in target/<profile>/deps.
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().join("libdmc_ffi.a")
}

#[test]
fn c_program_links_and_runs() {
    let lib = static_lib();
    if !lib.exists() {
        panic!("static library not found at {}", lib.display());
    }
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");

    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        vocab_size: 256,
        max_seq: 16,
        dmc_enabled: true,
        ..ModelConfig::default()
    };
    let mut model = Model::init(cfg, 5).unwrap();
    round_weights(&mut model);
    let ck = Checkpoint::new(
        model,
        AttentionSpec::Compressed {
            variant: DmcVariant::Dmc,
            decision_offset: 5.0,
            window: 4,
            pool_width: None,
        },
        TrainingState {
            phase: "test".into(),
            step: 0,
            seed: 5,
            target_cr: None,
            achieved_cr: None,
            val_loss: None,
        },
    );
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let out = Command::new(&exe).arg(&path).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.starts_with("layers=2 heads=2 compressed=1 tokens=6 slots="), "{stdout}");

    let mut cache = dmc_core::harness::eval::compressed_cache(&ck.model, &ck.manifest.attention).unwrap();
    let logits = ck.model.decode_sequence(&[97, 98, 99, 97, 98, 99], &mut cache).unwrap();
    let slots: usize = cache.lengths().concat().iter().sum();
    assert!(stdout.contains(&format!("slots={slots} ")), "{stdout}");
    let printed: f64 = stdout.trim_end().rsplit('=').next().unwrap().parse().unwrap();
    assert_eq!(printed, logits[5][0]);
}

fn which_cc() -> Result<String, ()> {
    for cc in [std::env::var("CC").unwrap_or_default(), "cc".into(), "gcc".into(), "clang".into()] {
        if !cc.is_empty() && Command::new(&cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc);
        }
    }
    Err(())
}
