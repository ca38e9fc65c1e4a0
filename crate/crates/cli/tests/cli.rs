use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
shape = [16, 16, 4]

[toy]
n = 8
n_test = 4

[compression]
n_z = 2
K = 16
base_channels = 4
num_groups = 2
disc_channels = 2
perceptual_channels = [2]

[vqgan]
steps = 3

[denoiser]
widths = [4, 4]
num_groups = 2
time_dim = 4
semantic_channels = 2
spade_hidden = 2

[diffusion]
T = 5
train_steps = 3

[seg]
epochs = 1
widths = [2, 2]
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volsynth"))
        .args(args)
        .env("VOLSYNTH_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every step of the tiny pipeline under `root`; returns the directories.
fn full_chain(root: &Path) -> Vec<PathBuf> {
    let cfg = root.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let d = |n: &str| root.join(n);
    let manifest = d("data").join("manifest.tsv");
    let vq = d("vq").join("vqgan.ckpt");
    let sdm = d("sdm").join("sdm.ckpt");
    let c = s(&cfg);
    ok(&["--config", c, "--out", s(&d("data")), "gen-toy"]);
    ok(&["--config", c, "--out", s(&d("vq")), "train-vqgan", "--manifest", s(&manifest)]);
    ok(&[
        "--config", c, "--out", s(&d("sdm")), "train-sdm", "--manifest", s(&manifest),
        "--vqgan", s(&vq),
    ]);
    let map = fs::read_dir(d("data"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with("_seg.nii"))
        .min()
        .expect("toy maps written");
    ok(&[
        "--config", c, "--out", s(&d("sample")), "sample", "--vqgan", s(&vq), "--sdm", s(&sdm),
        "--map", s(&map), "--snapshot-every", "2",
    ]);
    ok(&[
        "--config", c, "--out", s(&d("eval")), "evaluate", "--manifest", s(&manifest),
        "--vqgan", s(&vq), "--sdm", s(&sdm),
    ]);
    ok(&[
        "--config", c, "--out", s(&d("faith")), "faithfulness", "--manifest", s(&manifest),
        "--vqgan", s(&vq), "--sdm", s(&sdm),
    ]);
    let sample = d("sample").join("sample.nii");
    ok(&["--out", s(&d("fig")), "montage", s(&sample), s(&sample)]);
    ["data", "vq", "sdm", "sample", "eval", "faith", "fig"]
        .iter()
        .map(|n| d(n))
        .collect()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_subcommands() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-toy", "train-vqgan", "train-sdm", "sample", "evaluate", "faithfulness", "montage", "info"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let unknown = run(&["--out", out, "--set", "vqgan.stepz=3", "info"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("vqgan"));
    let indivisible = run(&["--out", out, "--set", "data.shape=[15,16,8]", "info"]);
    assert_eq!(indivisible.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_exits_with_code_5() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"VSYNCKP1 but nothing else").unwrap();
    let out = run(&["--out", s(dir.path()), "info", "--vqgan", s(&bad)]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn info_counts_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["--out", s(dir.path()), "info"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("semantic map encoder") && text.contains("total"));
    assert!(dir.path().join("config.toml").exists());
}

#[test]
fn tiny_pipeline_writes_outputs_and_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let dirs_a = full_chain(a.path());
    let dirs_b = full_chain(b.path());

    for f in ["vq/vqgan.ckpt", "vq/vqgan_losses.csv", "sdm/sdm.ckpt", "sdm/sdm_losses.csv",
        "sample/sample.nii", "eval/summary.csv", "faith/dice.csv", "fig/montage.png"]
    {
        assert!(a.path().join(f).exists(), "{f} missing");
    }
    assert!(!a.path().join("vq/vqgan_wallclock.txt").exists());
    let snaps = fs::read_dir(a.path().join("sample/snapshots")).unwrap().count();
    assert!(snaps >= 2, "{snaps} snapshots");
    let summary = fs::read_to_string(a.path().join("eval/summary.csv")).unwrap();
    for key in ["frechet", "psnr", "ssim"] {
        assert!(summary.contains(key));
    }

    for (da, db) in dirs_a.iter().zip(&dirs_b) {
        let (ta, tb) = (tree(da), tree(db));
        assert_eq!(
            ta.iter().map(|x| &x.0).collect::<Vec<_>>(),
            tb.iter().map(|x| &x.0).collect::<Vec<_>>()
        );
        for ((name, x), (_, y)) in ta.iter().zip(&tb) {
            assert!(x == y, "{} differs between runs", da.join(name).display());
        }
    }
}
