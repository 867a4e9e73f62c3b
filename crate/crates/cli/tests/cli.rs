use std::path::Path;
use std::process::{Command, Output};

use esm_stereo::data::pfm::{read_pfm, write_pfm};
use esm_stereo::data::{load_sample, read_manifest};
use esm_stereo::esm::upsample_disparity;
use esm_stereo::nn::Ctx;
use esm_stereo::trainer::save_checkpoint;
use esm_stereo::{EsmStereo, ModelConfig, Variant, VolumeKind};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esmstereo")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn synth(dir: &Path, count: usize, seed: u64) -> String {
    let out = run(&["synth", "--out", dir.to_str().unwrap(), "--count", &count.to_string(), "--seed", &seed.to_string()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("manifest.txt").to_string_lossy().into_owned()
}

#[test]
fn gradcheck_passes_on_a_fresh_checkout() {
    let out = run(&["gradcheck", "--seeds", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("hourglass3d_reduced"));
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["bogus"])), 1);
    assert_eq!(code(&run(&["gradcheck", "--filter", "no-such-case"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.txt");
    let out = run(&["eval", "--manifest", missing.to_str().unwrap(), "--predictions", ".", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), 2, 7);
    synth(b.path(), 2, 7);
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let data = tempfile::tempdir().unwrap();
    let manifest = synth(data.path(), 3, 1);
    let preds = data.path().join("preds");
    std::fs::create_dir(&preds).unwrap();
    for e in read_manifest(&manifest).unwrap() {
        let gt = read_pfm(&e.gt).unwrap();
        write_pfm(preds.join(format!("{}.pfm", e.id())), &gt.data, gt.width, gt.height).unwrap();
    }
    let report = data.path().join("report");
    let out = run(&["eval", "--manifest", &manifest, "--predictions", preds.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(report.join("report.txt")).unwrap();
    assert!(text.contains("epe=0\n"), "{text}");
    assert!(text.contains("d1=0\n"), "{text}");
    assert!(report.join("report.json").exists());
}

#[test]
fn infer_with_zeroed_refinement_upsamples_the_initial_map() {
    let data = tempfile::tempdir().unwrap();
    let manifest = synth(data.path(), 1, 3);
    let cfg = ModelConfig::desk(Variant::S, VolumeKind::Gwc);
    let (net, mut store) = EsmStereo::build::<f32>(&cfg).unwrap();
    net.zero_refinement_heads(&mut store);
    let ckpt = data.path().join("ckpt");
    save_checkpoint(&ckpt, &cfg, &store, None, 0).unwrap();

    let out_dir = data.path().join("out");
    let out = run(&["infer", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", &manifest, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let entry = &read_manifest(&manifest).unwrap()[0];
    let s = load_sample(entry).unwrap();
    let (h, w) = (s.height(), s.width());
    let fwd = net
        .forward(&Ctx::eval(&store), &s.left.reshape(&[1, 3, h, w]).unwrap(), &s.right.reshape(&[1, 3, h, w]).unwrap())
        .unwrap();
    let mut chain = fwd.preds[0].data.clone();
    for _ in 0..net.stages.len() {
        chain = upsample_disparity(&chain).unwrap();
    }
    let want: Vec<f32> = chain.data().iter().map(|v| v.clamp(0.0, cfg.d_max as f32)).collect();
    let got = read_pfm(out_dir.join(format!("{}.pfm", s.id))).unwrap();
    assert_eq!((got.width, got.height), (w, h));
    let worst = got.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst < 1e-4, "max deviation {worst}");
    for suffix in ["_disp.png", "_error.png"] {
        assert!(out_dir.join(format!("{}{suffix}", s.id)).exists());
    }
}

#[test]
fn train_writes_a_loadable_checkpoint_and_loss_curve() {
    let data = tempfile::tempdir().unwrap();
    let manifest = synth(data.path(), 2, 5);
    let ckpt = data.path().join("ckpt");
    let logs = data.path().join("logs");
    let out = run(&[
        "train",
        "--manifest",
        &manifest,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--epochs",
        "1",
        "--seed",
        "3",
        "--out",
        logs.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.join("manifest.json").exists());
    assert!(ckpt.join("config.toml").exists());
    let csv = std::fs::read_to_string(logs.join("losses.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    let report = data.path().join("report");
    let out = run(&["eval", "--manifest", &manifest, "--checkpoint", ckpt.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(report.join("report.txt")).unwrap().contains("bad_3="));
}
