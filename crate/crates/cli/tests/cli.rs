use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(rel)
}

fn image(name: &str) -> String {
    fixture(&format!("images/{name}.pgm"))
        .to_string_lossy()
        .into_owned()
}

fn ptdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptdiff"))
        .args(args)
        .env_remove("PTDIFF_ADDR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ptdiff(args);
    assert!(
        out.status.success(),
        "ptdiff {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn no_partials(dir: &Path) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let name = entry.unwrap().file_name();
        assert!(
            !name.to_string_lossy().ends_with(".partial"),
            "{name:?} left behind"
        );
    }
}

fn generate(out: &Path, extra: &[&str]) -> Value {
    let face = image("face");
    let mut args = vec![
        "generate",
        "--ref",
        &face,
        "--prompt",
        "stripes",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    no_partials(out);
    json(&out.join("metrics.json"))
}

#[test]
fn generate_is_deterministic_and_reproducible_from_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    generate(&a, &["--seed", "5", "--d", "-3"]);
    generate(&b, &["--seed", "5", "--d", "-3"]);
    for name in ["output.pgm", "latent.ptt", "metrics.json", "config.json"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let config = a.join("config.json");
    ok(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(a.join("latent.ptt")).unwrap(),
        std::fs::read(c.join("latent.ptt")).unwrap()
    );
}

#[test]
fn empty_transfer_stage_matches_disabled_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    generate(&a, &["--lambda", "1", "--tau", "1"]);
    generate(&b, &["--no-ptm"]);
    assert_eq!(
        std::fs::read(a.join("latent.ptt")).unwrap(),
        std::fs::read(b.join("latent.ptt")).unwrap()
    );
}

#[test]
fn trajectories_are_dumped_on_request() {
    let dir = tempfile::tempdir().unwrap();
    generate(
        dir.path(),
        &["--steps", "10", "--invert-steps", "10", "--dump-trajectory"],
    );
    let traj = dir.path().join("trajectories");
    let count = std::fs::read_dir(&traj).unwrap().count();
    // Inversion and sampling keep all eleven states; reconstruction stops
    // with the transfer stage after six steps.
    assert_eq!(count, 29, "{traj:?}");
}

#[test]
fn sweep_writes_one_row_per_distance() {
    let dir = tempfile::tempdir().unwrap();
    let face = image("face");
    let out = ok(&[
        "sweep",
        "--ref",
        &face,
        "--prompt",
        "stripes",
        "--d",
        "-9..9",
        "--step",
        "3",
        "--seeds",
        "20",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    no_partials(dir.path());
    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(text, String::from_utf8(out.stdout).unwrap());
    let rows: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let ds: Vec<i64> = rows.iter().map(|r| r["d"].as_i64().unwrap()).collect();
    assert_eq!(ds, [-9, -6, -3, 0, 3, 6, 9]);
    let means: Vec<f64> = rows
        .iter()
        .map(|r| r["phase_correlation_mean"].as_f64().unwrap())
        .collect();
    for r in &rows {
        assert_eq!(r["runs"].as_array().unwrap().len(), 20);
    }
    assert!(means.first() < means.last(), "{means:?}");
    let images = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "pgm")
        })
        .count();
    assert_eq!(images, 140);
}

#[test]
fn inversion_code_of_an_in_distribution_sample_is_near_standard() {
    let dir = tempfile::tempdir().unwrap();
    let (gray, sample) = (image("gray"), image("gray_sample"));
    ok(&[
        "invert",
        "--mixture",
        &gray,
        "--sigma",
        "0.3",
        "--ref",
        &sample,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let m = json(&dir.path().join("metrics.json"));
    let n = m["n"].as_f64().unwrap();
    let (mean, std) = (m["mean"].as_f64().unwrap(), m["std"].as_f64().unwrap());
    assert!(mean.abs() < 3.0 / n.sqrt(), "mean {mean}");
    assert!(
        (std * std - 1.0).abs() < 3.0 * (2.0 / n).sqrt(),
        "variance {}",
        std * std
    );
    assert!(dir.path().join("code.ptt").exists());
}

#[test]
fn single_inversion_step_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate(dir.path(), &["--invert-steps", "1"]);
    assert!(m["phase_correlation"].as_f64().unwrap().is_finite());
}

#[test]
fn forward_diffusion_guidance_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    generate(
        &a,
        &["--guidance-source", "forward_diffusion", "--seed", "3"],
    );
    generate(
        &b,
        &["--guidance-source", "forward_diffusion", "--seed", "3"],
    );
    assert_eq!(
        std::fs::read(a.join("latent.ptt")).unwrap(),
        std::fs::read(b.join("latent.ptt")).unwrap()
    );
}

#[test]
fn ablations() {
    let dir = tempfile::tempdir().unwrap();
    let face = image("face");
    let run = |mode: &str| {
        let out = dir.path().join(mode);
        ok(&[
            "ablate",
            "--mode",
            mode,
            "--ref",
            &face,
            "--prompt",
            "stripes",
            "--out",
            out.to_str().unwrap(),
        ]);
        (
            json(&out.join("metrics.json")),
            json(&out.join("config.json")),
        )
    };
    let (m, c) = run("no_refine");
    assert_eq!(m["stats"]["transfer_steps"], 100);
    assert_eq!(m["stats"]["refine_steps"], 0);
    assert_eq!(c["ablation"], "no_refine");
    let (m, _) = run("no_ptm");
    assert!(m["phase_correlation"].as_f64().unwrap().abs() < 0.2);
    assert_eq!(m["stats"]["transfer_steps"], 0);
    assert_eq!(m["stats"]["refine_steps"], 100);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let face = image("face");
    let code = |args: &[&str]| ptdiff(args).status.code();

    let base = [
        "generate", "--ref", &face, "--prompt", "stripes", "--out", out,
    ];
    assert_eq!(code(&[&base[..], &["--steps", "0"]].concat()), Some(2));
    assert_eq!(code(&[&base[..], &["--steps", "7"]].concat()), Some(2));
    assert_eq!(
        code(&["generate", "--ref", &face, "--prompt", "nothing", "--out", out]),
        Some(2)
    );
    assert_eq!(code(&[&base[..], &["--d", "-3..3"]].concat()), Some(2));
    assert_eq!(code(&["generate", "--ref", &face, "--out", out]), Some(2));
    assert_eq!(
        code(&[&base[..], &["--backend", "remote", "--addr", "127.0.0.1:9"]].concat()),
        Some(3)
    );
    assert_eq!(
        code(&[
            "generate",
            "--ref",
            "/no/such.pgm",
            "--prompt",
            "stripes",
            "--out",
            out
        ]),
        Some(4)
    );
    let bogus = dir.path().join("bogus.pgm");
    std::fs::write(&bogus, "P5\n2 2\n255\nx").unwrap();
    assert_eq!(
        code(&[
            "generate",
            "--ref",
            bogus.to_str().unwrap(),
            "--prompt",
            "stripes",
            "--out",
            out
        ]),
        Some(4)
    );
    no_partials(dir.path());
}

#[test]
fn schedule_dump_lists_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("abar.ptt");
    let out = ok(&[
        "schedule-dump",
        "--steps",
        "10",
        "--lambda",
        "0.35",
        "--ptt",
        table.to_str().unwrap(),
    ]);
    let rows: Vec<Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[0]["from"], 1000);
    assert_eq!(rows[9]["to"], 0);
    let transfer = rows.iter().filter(|r| r["stage"] == "transfer").count();
    assert_eq!(transfer, 7);
    assert!(rows
        .iter()
        .filter(|r| r["stage"] == "refine")
        .all(|r| r["blend"].is_null()));
    assert!(std::fs::metadata(&table).unwrap().len() > 1000 * 4);
}

#[test]
fn protocol_echo_check_passes_on_golden_frames() {
    let out = ok(&[
        "protocol-echo",
        "--check",
        fixture("protocol").to_str().unwrap(),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("ok ")).count(), 10);
}
