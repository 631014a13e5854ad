use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lptn::io::{load_image, save_image};
use lptn::{Shape, Tensor};

const QUANT: f64 = 2.0 / 255.0;

const TINY: &[&str] = &[
    "--set=generator.low_channels=4",
    "--set=generator.mask_channels=2",
    "--set=generator.num_res_blocks=1",
    "--set=discriminator.base_channels=2",
    "--set=discriminator.max_channels=4",
    "--set=discriminator.num_layers=2",
    "--set=train.crop=32",
    "--set=train.batch_size=2",
    "--set=train.eval_every=5",
    "--set=train.eval_images=2",
    "--set=train.checkpoint_every=5",
    "--set=toy.size=32",
    "--set=toy.count=4",
];

fn lptn(args: &[&str]) -> Output {
    lptn_env(args, &[])
}

fn lptn_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lptn"));
    cmd.args(args).env_remove(lptn_cli::THREADS_ENV);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn lptn")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn test_image(dir: &Path, name: &str, h: usize, w: usize, amp: f32) -> PathBuf {
    let img = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        amp * (((y * 3 + x * 5 + c * 11) % 17) as f32 / 8.0 - 1.0)
    });
    let path = dir.join(name);
    save_image(&img, &path).unwrap();
    path
}

#[test]
fn decompose_then_reconstruct_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let input = test_image(dir.path(), "in.ppm", 45, 60, 1.0);
    let bands = dir.path().join("bands");
    ok(&lptn(&["decompose", s(&input), "--levels", "3", "--out", s(&bands)]));
    for f in ["pyramid.lptn", "high_0.ppm", "high_1.ppm", "high_2.ppm", "low.ppm"] {
        assert!(bands.join(f).exists(), "{f}");
    }
    let out = dir.path().join("out.ppm");
    ok(&lptn(&["reconstruct", s(&bands), "--out", s(&out)]));
    let (a, b) = (load_image(&input).unwrap(), load_image(&out).unwrap());
    assert_eq!(a.shape(), b.shape());
    assert!(a.max_abs_diff(&b).unwrap() <= QUANT / 2.0 + 1e-6);
}

#[test]
fn band_previews_are_affine_in_the_band() {
    let dir = tempfile::tempdir().unwrap();
    let input = test_image(dir.path(), "in.ppm", 32, 32, 0.3);
    let bands = dir.path().join("bands");
    ok(&lptn(&["decompose", s(&input), "--levels", "2", "--out", s(&bands), "--band-gain", "2"]));
    let pyr = lptn::io::load_pyramid(bands.join("pyramid.lptn")).unwrap();
    let preview = load_image(bands.join("high_0.ppm")).unwrap();
    let expect = pyr.highs[0].map(|v| (v * 2.0).clamp(-1.0, 1.0));
    assert!(preview.max_abs_diff(&expect).unwrap() <= QUANT / 2.0 + 1e-6);
}

#[test]
fn inadmissible_levels_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = test_image(dir.path(), "in.ppm", 16, 16, 1.0);
    let out = lptn(&["decompose", s(&input), "--levels", "9", "--out", s(&dir.path().join("b"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--levels 9"));
    assert_eq!(code(&lptn(&["decompose", s(&input), "--levels", "0", "--out", "x"])), 2);
}

#[test]
fn missing_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = test_image(dir.path(), "in.ppm", 16, 16, 1.0);
    let missing = dir.path().join("nope.lptn");
    let out = lptn(&["translate", s(&input), "--checkpoint", s(&missing), "--out", "o.ppm"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.lptn"));
    assert_eq!(code(&lptn(&["decompose", s(&missing), "--levels", "1", "--out", "x"])), 2);
}

#[test]
fn corrupt_checkpoint_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let input = test_image(dir.path(), "in.ppm", 16, 16, 1.0);
    let ck = dir.path().join("bad.lptn");
    fs::write(&ck, b"not a checkpoint").unwrap();
    assert_eq!(code(&lptn(&["translate", s(&input), "--checkpoint", s(&ck), "--out", "o.ppm"])), 1);
}

#[test]
fn identity_checkpoint_translates_to_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = test_image(dir.path(), "in.ppm", 40, 48, 0.1);
    let ck = dir.path().join("id.lptn");
    ok(&lptn(&["init", "--out", s(&ck), "--init", "identity", "--set=generator.low_channels=8"]));
    let a = load_image(&input).unwrap();
    for extra in [&[][..], &["--no-refine-high"][..]] {
        let out = dir.path().join("t.ppm");
        let mut args = vec!["translate", s(&input), "--checkpoint", s(&ck), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&lptn(&args));
        let b = load_image(&out).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(&b).unwrap() <= 2e-3 + QUANT, "{extra:?}");
    }
    // Changing the level count no longer matches the stored tensors.
    let out = lptn(&["translate", s(&input), "--checkpoint", s(&ck), "--out", "o.ppm", "--levels", "2"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("finetune_blocks"));
}

#[test]
fn bench_rejects_too_few_runs() {
    let out = lptn(&["bench", "--runs", "1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 5"));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    ok(&lptn(&["bench", "--resolutions", "64x32", "--levels", "1,2", "--runs", "5", "--warmup", "0", "--csv", s(&csv)]));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], lptn_cli::bench::CSV_HEADER);
    assert_eq!(lines.len(), 1 + 2 * lptn_cli::bench::Stage::ALL.len());
    assert!(lines[1].starts_with("64x32,32,64,1,decompose,"));
}

#[test]
fn stats_prints_one_row_per_band() {
    let dir = tempfile::tempdir().unwrap();
    let a = test_image(dir.path(), "a.ppm", 32, 32, 0.5);
    let b = test_image(dir.path(), "b.ppm", 32, 32, 0.4);
    let text = ok(&lptn(&["stats", s(&a), s(&b), "--levels", "2"]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "band,mse,hist_a,hist_b");
    let bands: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(bands, ["high_0", "high_1", "low"]);
    let hist: Vec<u64> = lines[3].split(',').nth(2).unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    assert_eq!(hist.len(), lptn::pyramid::HIST_BINS);
}

fn train(out: &Path, steps: &str, extra: &[&str], env: &[(&str, &str)]) -> Output {
    let mut args = vec!["train", "--toy", "--steps", steps, "--out", s(out), "--quiet"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    lptn_env(&args, env)
}

#[test]
fn toy_training_writes_outputs_and_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    ok(&train(&full, "15", &[], &[]));
    let csv = fs::read_to_string(full.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 16);
    assert!(full.join("checkpoint.lptn").exists());

    // Stop at 10, a step on both the checkpoint and the validation cadence,
    // then resume to 15.
    let part = dir.path().join("part");
    ok(&train(&part, "10", &[], &[]));
    let ck = part.join("checkpoint.lptn");
    ok(&lptn(&["train", "--steps", "15", "--out", s(&part), "--resume", s(&ck), "--quiet"]));
    assert_eq!(fs::read_to_string(part.join("metrics.csv")).unwrap(), csv);
    assert_eq!(fs::read(part.join("checkpoint.lptn")).unwrap(), fs::read(full.join("checkpoint.lptn")).unwrap());
}

#[test]
fn invalid_training_options_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(&dir.path().join("r"), "2", &["--ratio", "1:x"], &[])), 2);
    assert_eq!(code(&train(&dir.path().join("k"), "2", &["--set", "no.such=1"], &[])), 2);
    assert_eq!(code(&lptn(&["train", "--steps", "2", "--out", s(dir.path())])), 2);
}

#[test]
fn thread_count_from_env_and_flag_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&train(&a, "3", &[], &[(lptn_cli::THREADS_ENV, "2")]));
    ok(&train(&b, "3", &["--threads", "2"], &[]));
    ok(&train(&c, "3", &["--threads", "1"], &[]));
    let read = |p: &Path| fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&a), read(&c));
    assert_eq!(code(&train(&dir.path().join("z"), "1", &["--threads", "0"], &[])), 2);
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let out = ok(&lptn(&["gradcheck"]));
    assert!(out.contains("tanh") && !out.contains("FAIL"), "{out}");
    let out = lptn(&["gradcheck", "--inject-fault", "tanh"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("tanh"));
    assert_eq!(code(&lptn(&["gradcheck", "--inject-fault", "nonsense"])), 2);
}
