use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
audio = 6
video = 6
paired = 6
multiview = 4

[train]
batch = 2
stage1_audio_steps = 3
stage1_video_steps = 3
stage2_steps = 3
stage3_steps = 2
log_every = 1

[eval]
scenes = 3
sampler_steps = 4
"#;

fn cameo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cameo"))
        .args(args)
        .current_dir(dir)
        .env_remove("IAP_SEED")
        .output()
        .expect("runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cameo(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.toml"), TINY).unwrap();
    d
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_file() {
            out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
        }
    }
    out
}

/// Run log with wall-clock times removed.
fn log_without_time(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn gen_data_is_byte_reproducible() {
    let d = setup();
    let p = d.path();
    for out in ["a", "b"] {
        ok(
            p,
            &[
                "gen-data",
                "--config",
                "tiny.toml",
                "--scenes",
                "12",
                "--mix",
                "paired",
                "--seed",
                "1",
                "--out",
                out,
            ],
        );
    }
    let (a, b) = (tree(&p.join("a")), tree(&p.join("b")));
    assert_eq!(a.len(), b.len());
    assert!(a.len() > 12);
    assert_eq!(a, b);
    ok(
        p,
        &[
            "gen-data",
            "--config",
            "tiny.toml",
            "--scenes",
            "12",
            "--mix",
            "paired",
            "--seed",
            "2",
            "--out",
            "c",
        ],
    );
    assert_ne!(a, tree(&p.join("c")));
}

#[test]
fn stage_chain_train_and_sample_are_reproducible() {
    let d = setup();
    let p = d.path();
    for run in ["r1", "r2"] {
        let c = ["--config", "tiny.toml", "--seed", "7", "--out", run];
        ok(p, &[&["train", "--stage", "stage1_audio"][..], &c].concat());
        let init = format!("{run}/stage1_audio.ckpt");
        ok(
            p,
            &[&["train", "--stage", "stage1_video", "--init", &init][..], &c].concat(),
        );
        let init = format!("{run}/stage1_video.ckpt");
        ok(
            p,
            &[&["train", "--stage", "stage2_joint", "--init", &init][..], &c].concat(),
        );
        let ck = format!("{run}/stage2_joint.ckpt");
        let out = format!("{run}/sample");
        ok(p, &["sample", "--checkpoint", &ck, "--seed", "7", "--out", &out]);
    }
    for stage in ["stage1_audio", "stage1_video", "stage2_joint"] {
        let a = fs::read(p.join(format!("r1/{stage}.ckpt"))).unwrap();
        let b = fs::read(p.join(format!("r2/{stage}.ckpt"))).unwrap();
        assert_eq!(a, b, "{stage} checkpoint differs");
        let la = log_without_time(&p.join(format!("r1/{stage}.jsonl")));
        assert_eq!(la.len(), 3);
        assert_eq!(la, log_without_time(&p.join(format!("r2/{stage}.jsonl"))));
    }
    assert_eq!(tree(&p.join("r1/sample")), tree(&p.join("r2/sample")));
    assert_eq!(tree(&p.join("r1/sample")).len(), 3);

    // Stage order is enforced.
    let out = cameo(
        p,
        &[
            "train",
            "--stage",
            "stage3_multiview",
            "--init",
            "r1/stage1_audio.ckpt",
            "--config",
            "tiny.toml",
            "--seed",
            "7",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    // A different seed means a different model and world.
    let out = cameo(
        p,
        &[
            "train",
            "--stage",
            "stage2_joint",
            "--init",
            "r1/stage1_video.ckpt",
            "--config",
            "tiny.toml",
            "--seed",
            "8",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed: 7 != 8"));
}

#[test]
fn resume_continues_the_log_and_matches_a_straight_run() {
    let d = setup();
    let p = d.path();
    ok(
        p,
        &[
            "train",
            "--stage",
            "stage2_joint",
            "--config",
            "tiny.toml",
            "--steps",
            "4",
            "--out",
            "straight",
        ],
    );
    ok(
        p,
        &[
            "train",
            "--stage",
            "stage2_joint",
            "--config",
            "tiny.toml",
            "--steps",
            "2",
            "--out",
            "split",
        ],
    );
    ok(
        p,
        &[
            "train",
            "--stage",
            "stage2_joint",
            "--config",
            "tiny.toml",
            "--steps",
            "4",
            "--resume",
            "split/stage2_joint.ckpt",
            "--out",
            "split",
        ],
    );
    assert_eq!(
        log_without_time(&p.join("straight/stage2_joint.jsonl")),
        log_without_time(&p.join("split/stage2_joint.jsonl"))
    );
    let a = fs::read(p.join("straight/stage2_joint.ckpt")).unwrap();
    let b = fs::read(p.join("split/stage2_joint.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn exit_codes_follow_the_contract() {
    let d = setup();
    let p = d.path();
    let out = cameo(p, &["train", "--stge", "stage1_audio"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--stage"));
    assert_eq!(cameo(p, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(cameo(p, &["train", "--stage", "stage9"]).status.code(), Some(1));
    assert_eq!(cameo(p, &["--help"]).status.code(), Some(0));
    assert_eq!(
        cameo(p, &["eval", "--checkpoint", "missing.ckpt"]).status.code(),
        Some(2)
    );
    fs::write(p.join("bad.toml"), "[train]\nbatch = \"many\"\n").unwrap();
    assert_eq!(
        cameo(p, &["gen-data", "--config", "bad.toml", "--scenes", "1"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let d = setup();
    let p = d.path();
    let with_seed = format!("seed = 5\n{TINY}");
    fs::write(p.join("seeded.toml"), with_seed).unwrap();
    let msg = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_cameo"));
        c.args(args).current_dir(p).env_remove("IAP_SEED");
        if let Some(e) = env {
            c.env("IAP_SEED", e);
        }
        let out = c.output().unwrap();
        assert!(out.status.success());
        String::from_utf8(out.stdout).unwrap()
    };
    let base = [
        "gen-data",
        "--scenes",
        "1",
        "--mix",
        "audio",
        "--out",
        "g",
        "--config",
        "seeded.toml",
    ];
    assert!(msg(&base, None).contains("(seed 5)"));
    assert!(msg(&base, Some("9")).contains("(seed 9)"));
    assert!(msg(&[&base[..], &["--seed", "3"]].concat(), Some("9")).contains("(seed 3)"));
    assert!(msg(&["gen-data", "--scenes", "1", "--mix", "audio", "--out", "g"], None).contains("(seed 0)"));
}

#[test]
fn eval_ablate_curate_and_inspect_write_reports() {
    let d = setup();
    let p = d.path();
    ok(
        p,
        &[
            "ablate",
            "--config",
            "tiny.toml",
            "--disable",
            "identity-embeddings",
            "--seed",
            "7",
            "--out",
            "abl",
        ],
    );
    let rows: Vec<serde_json::Value> = fs::read_to_string(p.join("abl/report.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let tags: std::collections::BTreeSet<_> = rows.iter().map(|r| r["tag"].as_str().unwrap().to_string()).collect();
    assert_eq!(tags.into_iter().collect::<Vec<_>>(), ["full", "no_identity_embeddings"]);
    assert!(rows
        .iter()
        .any(|r| r["tag"] == "no_identity_embeddings" && r["flags"]["identity_embeddings"] == false));
    assert!(p.join("abl/full/seed7/stage3_multiview.ckpt").exists());

    let table = ok(
        p,
        &[
            "eval",
            "--checkpoint",
            "abl/full/seed7/stage3_multiview.ckpt",
            "--split",
            "large-pose",
            "--out",
            "rep.jsonl",
        ],
    );
    assert!(table.contains("joint"));
    assert_eq!(fs::read_to_string(p.join("rep.jsonl")).unwrap().lines().count(), 3);

    let s = ok(p, &["curate", "--synthetic", "3", "--out", "cur"]);
    assert!(s.contains("18 clips"));
    assert!(p.join("cur/pairs.jsonl").exists());

    let layout = ok(p, &["inspect-positions", "--subjects", "2", "--views", "3"]);
    assert!(layout.contains("# video tower"));
    assert!(layout.lines().any(|l| l.contains(" reference 2 ")));
}
