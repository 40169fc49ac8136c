use std::path::Path;
use std::process::{Command, Output};

fn hgwm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgwm")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    assert_eq!(code(&hgwm(&["--help"])), 0);
    for sub in ["gen", "train", "eval", "render", "predict"] {
        let o = hgwm(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}: {}", text(&o));
    }
    let t = text(&hgwm(&["train", "--help"]));
    assert!(t.contains("step,l_bc,l_recon,l_task,l_pred,total,wall"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&hgwm(&["frobnicate"])), 1);
    assert_eq!(code(&hgwm(&[])), 1);
    let o = hgwm(&["gen", "--tsk", "push-box"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains("--task"), "{}", text(&o));
}

#[test]
fn runtime_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nothing");
    let o = hgwm(&["train", "--dataset", missing.to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    let o = hgwm(&["gen", "--task", "juggle", "--n", "1", "--out", d.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = hgwm(&["train", "--dataset", "x", "--set", "lr"]);
    assert_eq!(code(&o), 2);
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_predict_render_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    let run = d.path().join("run");
    let o = hgwm(&["gen", "--task", "handover-item", "--n", "1", "--seed", "3", "--out", s(&data), "--size", "16"]);
    assert_eq!(code(&o), 0, "{}", text(&o));

    let cfg = d.path().join("train.kv");
    std::fs::write(
        &cfg,
        "# small model\ngrid = 10\nfeat = 6\nconv_hidden = 4\nmlp_hidden = 8\nlatents = 2\nattn_dim = 4\nattn_layers = 1\npool = 2\nimage_size = 16\n",
    )
    .unwrap();
    let o = hgwm(&[
        "train", "--config", s(&cfg), "--dataset", s(&data), "--out", s(&run), "--steps", "3", "--set", "batch=2",
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    let ckpt = run.join("checkpoints/step_000003.ckpt");
    let report = d.path().join("report.kv");
    let o = hgwm(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--config", s(&cfg), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("psnr"));
    assert!(report.exists());

    // a config describing another model is a manifest mismatch
    let other = d.path().join("other.kv");
    std::fs::write(&other, "grid = 12\n").unwrap();
    let o = hgwm(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--config", s(&other)]);
    assert_eq!(code(&o), 2);

    let demo = data.join("demos/demo_0000");
    let pred = d.path().join("pred");
    let o = hgwm(&["predict", "--checkpoint", s(&ckpt), "--demo", s(&demo), "--step", "1", "--out", s(&pred)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(pred.join("future_view_2.ppm").exists());
    assert!(pred.join("current_view_0.labels.pgm").exists());

    let img = d.path().join("view.ppm");
    let o = hgwm(&[
        "render", "--scene", s(&demo.join("step_0/scene.bgs")), "--camera", "1", "--size", "16", "--out", s(&img),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(img.exists());
    let o = hgwm(&["render", "--scene", s(&demo.join("step_0/scene.bgs")), "--camera", "9", "--out", s(&img)]);
    assert_eq!(code(&o), 2);
}
