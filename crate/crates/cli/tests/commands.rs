use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use vssf::datastore::{read_checkpoint, read_dataset};
use vssf::model::SensorModel;
use vssf::training::SUPERVISION_SENSOR;

fn vssf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vssf"))
        .args(args)
        .env_remove("VSSF_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vssf(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    vssf(args).status.code().unwrap()
}

struct Dir(TempDir);

impl Dir {
    fn new() -> Self {
        Self(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }
}

fn gen(dir: &Dir, name: &str, n: usize, t: usize, seed: u64) -> String {
    let out = dir.s(name);
    ok(&["gen", "--env", "pendulum", "--n", &n.to_string(), "--T", &t.to_string(), "--seed", &seed.to_string(), "--out", &out]);
    out
}

fn trace_of(checkpoint: &str) -> String {
    std::fs::read_to_string(format!("{checkpoint}.trace.txt")).unwrap()
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_writes_image_array_and_prints_summary() {
    let dir = Dir::new();
    let out = dir.s("d.vssf");
    let stdout = ok(&["gen", "--env", "pendulum", "--n", "10", "--T", "5", "--seed", "7", "--out", &out]);
    assert!(stdout.lines().any(|l| l.starts_with("config {")), "{stdout}");
    assert!(stdout.contains("n=10 T=5 sensors=image seed=7"), "{stdout}");
    let d = read_dataset(Path::new(&out)).unwrap();
    assert_eq!(d.observation("image").unwrap().shape, [10, 5, 256]);
    assert_eq!(d.states.shape, [10, 5, 2]);
}

#[test]
fn gen_is_repeatable() {
    let dir = Dir::new();
    let a = gen(&dir, "a.vssf", 6, 4, 3);
    let b = gen(&dir, "b.vssf", 6, 4, 3);
    assert_eq!(bytes(&a), bytes(&b));
    let c = gen(&dir, "c.vssf", 6, 4, 4);
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn gen_accepts_empty_dataset() {
    let dir = Dir::new();
    let out = gen(&dir, "e.vssf", 0, 5, 1);
    let d = read_dataset(Path::new(&out)).unwrap();
    assert_eq!(d.count(), 0);
}

#[test]
fn gen_integrator_uses_config_file() {
    let dir = Dir::new();
    let cfg = dir.path("cfg.json");
    std::fs::write(&cfg, r#"{"env": "integrator", "n": 3, "T": 2, "seed": 5, "integrator": {"patch_size": 8}}"#).unwrap();
    let out = dir.s("i.vssf");
    let stdout = ok(&["--config", cfg.to_str().unwrap(), "gen", "--out", &out]);
    assert!(stdout.contains("\"patch_size\":8"), "{stdout}");
    let d = read_dataset(Path::new(&out)).unwrap();
    assert_eq!(d.observation("image").unwrap().shape, [3, 2, 64]);
    assert_eq!(d.seed, 5);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = Dir::new();
    let out = dir.s("x.vssf");
    assert_eq!(code(&["gen", "--out", &out, "--bogus"]), 2);
    assert_eq!(code(&["gen", "--out", &out, "--env", "cartpole"]), 2);
    assert_eq!(code(&["gen", "--out", &out, "--T", "0"]), 2);
    let cfg = dir.path("bad.json");
    std::fs::write(&cfg, r#"{"unknown_field": 1}"#).unwrap();
    assert_eq!(code(&["--config", cfg.to_str().unwrap(), "gen", "--out", &out]), 2);
    assert!(!Path::new(&out).exists());
}

#[test]
fn data_errors_exit_with_three() {
    let dir = Dir::new();
    let missing = dir.s("missing.vssf");
    let ck = dir.s("ck.vssf");
    assert_eq!(code(&["train", "--dataset", &missing, "--out", &ck]), 3);
    let garbage = dir.path("garbage.vssf");
    std::fs::write(&garbage, b"not a container").unwrap();
    assert_eq!(code(&["train", "--dataset", garbage.to_str().unwrap(), "--out", &ck]), 3);
}

#[test]
fn train_writes_checkpoint_and_trace() {
    let dir = Dir::new();
    let data = gen(&dir, "d.vssf", 12, 3, 1);
    let ck = dir.s("ck.vssf");
    let stdout = ok(&["train", "--dataset", &data, "--out", &ck, "--steps", "4", "--batch-size", "4", "--seed", "2"]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("step=")).count(), 4);
    assert!(stdout.contains("rho_A="));
    let trace = trace_of(&ck);
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("# step elbo kl recon rho_A"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(' ').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 4);
    for (k, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 5);
        assert_eq!(r[0], (k + 1) as f64);
        assert!((r[1] - (r[3] - r[2])).abs() < 1e-9 * r[1].abs().max(1.0));
    }
    assert_eq!(read_checkpoint(Path::new(&ck)).unwrap().adam.step, 4);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = Dir::new();
    let data = gen(&dir, "d.vssf", 12, 3, 1);
    let full = dir.s("full.vssf");
    let part = dir.s("part.vssf");
    let common = ["--batch-size", "4", "--seed", "9", "--supervision", "partial"];
    let with = |extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        v.extend(common.iter().map(|s| s.to_string()));
        v
    };
    let run = |args: Vec<String>| {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    };
    run(with(&["train", "--dataset", &data, "--out", &full, "--steps", "6"]));
    run(with(&["train", "--dataset", &data, "--out", &part, "--steps", "3"]));
    run(with(&["train", "--dataset", &data, "--out", &part, "--checkpoint", &part, "--steps", "6"]));
    assert_eq!(trace_of(&full), trace_of(&part));
    assert_eq!(bytes(&full), bytes(&part));
}

#[test]
fn periodic_checkpoints_do_not_change_the_run() {
    let dir = Dir::new();
    let data = gen(&dir, "d.vssf", 8, 3, 4);
    let a = dir.s("a.vssf");
    let b = dir.s("b.vssf");
    ok(&["train", "--dataset", &data, "--out", &a, "--steps", "5", "--batch-size", "4"]);
    ok(&["train", "--dataset", &data, "--out", &b, "--steps", "5", "--batch-size", "4", "--checkpoint-every", "2"]);
    assert_eq!(bytes(&a), bytes(&b));
}

#[test]
fn resume_rejects_changed_supervision() {
    let dir = Dir::new();
    let data = gen(&dir, "d.vssf", 8, 3, 4);
    let ck = dir.s("ck.vssf");
    ok(&["train", "--dataset", &data, "--out", &ck, "--steps", "1", "--batch-size", "4"]);
    let again = dir.s("again.vssf");
    let args = ["train", "--dataset", &data, "--out", &again, "--checkpoint", &ck, "--steps", "2", "--supervision", "full"];
    assert_eq!(code(&args), 3);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = Dir::new();
    let data = gen(&dir, "d.vssf", 40, 3, 6);
    let a = dir.s("a.vssf");
    let b = dir.s("b.vssf");
    let base = ["train", "--dataset", &data, "--steps", "3", "--batch-size", "40"];
    let mut one = base.to_vec();
    one.extend(["--out", &a, "--threads", "1"]);
    let mut two = base.to_vec();
    two.extend(["--out", &b, "--threads", "3"]);
    ok(&one);
    ok(&two);
    assert_eq!(bytes(&a), bytes(&b));
}

#[test]
fn full_supervision_reads_ground_truth_through_a_linear_sensor() {
    let dir = Dir::new();
    let data = gen(&dir, "d.vssf", 8, 3, 2);
    let ck = dir.s("ck.vssf");
    ok(&["train", "--dataset", &data, "--out", &ck, "--steps", "2", "--batch-size", "4", "--supervision", "full"]);
    let model = read_checkpoint(Path::new(&ck)).unwrap().model;
    let SensorModel::Linear(s) = &model.sensor(SUPERVISION_SENSOR).unwrap().model else {
        panic!("supervision sensor must be linear");
    };
    let eye = vssf::gaussian::Matrix::identity(2, 2);
    assert_eq!(s.c, eye);
    assert_eq!(s.sigma_x, eye * 0.05);
}

#[test]
fn eval_runs_far_beyond_training_length() {
    let dir = Dir::new();
    let data = gen(&dir, "d.vssf", 8, 5, 2);
    let long = gen(&dir, "long.vssf", 3, 200, 3);
    let ck = dir.s("ck.vssf");
    ok(&["train", "--dataset", &data, "--out", &ck, "--steps", "2", "--batch-size", "4", "--supervision", "partial"]);
    let metrics = dir.s("metrics.txt");
    ok(&["eval", "--checkpoint", &ck, "--dataset", &long, "--horizon", "200", "--out", &metrics]);
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert!(text.starts_with("# horizon=200 scored=0 n=3\n"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("mse ")));
    assert!(text.lines().any(|l| l.starts_with("mse_component_1 ")));
    let rows: Vec<&str> = text.lines().skip_while(|l| *l != "# t error").skip(1).collect();
    assert_eq!(rows.len(), 200);
    for (t, r) in rows.iter().enumerate() {
        let mut parts = r.split(' ');
        assert_eq!(parts.next().unwrap().parse::<usize>().unwrap(), t + 1);
        assert!(parts.next().unwrap().parse::<f64>().unwrap().is_finite());
    }
    assert_eq!(code(&["eval", "--checkpoint", &ck, "--dataset", &long, "--horizon", "201", "--out", &metrics]), 3);
}

#[test]
fn export_writes_one_row_per_step() {
    let dir = Dir::new();
    let data = gen(&dir, "d.vssf", 7, 4, 2);
    let ck = dir.s("ck.vssf");
    ok(&["train", "--dataset", &data, "--out", &ck, "--steps", "1", "--batch-size", "4"]);
    let out = dir.s("latent.txt");
    ok(&["export", "--checkpoint", &ck, "--dataset", &data, "--out", &out]);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# trajectory t true_0 true_1 mean_0 mean_1 var_0 var_1"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 7 * 4);
    assert!(rows.iter().all(|r| r.split(' ').count() == 8));
    let variances: Vec<f64> = rows.iter().flat_map(|r| r.split(' ').skip(6).map(|v| v.parse::<f64>().unwrap())).collect();
    assert!(variances.iter().all(|v| *v > 0.0));
}

#[test]
fn partial_supervision_recovers_the_true_scale() {
    let dir = Dir::new();
    let data = gen(&dir, "d.vssf", 200, 5, 1);
    let ck = dir.s("ck.vssf");
    ok(&["train", "--dataset", &data, "--out", &ck, "--steps", "300", "--supervision", "partial", "--seed", "3"]);
    let out = dir.s("latent.txt");
    ok(&["export", "--checkpoint", &ck, "--dataset", &data, "--out", &out]);
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(' ').map(|v| v.parse().unwrap()).collect())
        .collect();
    let std = |col: usize| {
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r[col]).sum::<f64>() / n;
        (rows.iter().map(|r| (r[col] - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    let ratio = std(4) / std(2);
    assert!((0.5..=2.0).contains(&ratio), "latent/true scale ratio {ratio}");
}
