use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use modtune_cli::commands::{smooth_records, Aggregate, RunSummary, SweepRow};
use modtune_core::metrics::read_metrics;
use modtune_core::{checkpoint, ModelConfig, TransformerModel};

const TINY: &str = "\
model.n_layers = 4
model.d_model = 32
model.d_ff = 64
model.n_heads = 2
model.max_seq_len = 32
mod.k = 2
train.max_steps = 12
train.eval_every = 4
train.eval_batches = 1
data.samples = 300
data.digits = 2
eval.samples = 5
sweep.max_k = 3
sweep.prompts = 2
gen.max_new_tokens = 4
";

fn modtune(args: &[&str]) -> Output {
    modtune_env(args, &[])
}

fn modtune_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_modtune"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Workspace { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.cfg")
    }

    fn pretrain(&self) -> PathBuf {
        let out = self.path("base");
        ok(&modtune(&["pretrain", "--config", s(&self.config()), "--out", s(&out)]));
        out.join("checkpoint.bin")
    }
}

#[test]
fn config_errors_name_the_line_and_exit_1() {
    let w = Workspace::new();
    let bad = w.path("bad.cfg");
    std::fs::write(&bad, "# comment\nmod.k = 2\nmod.wat = 1\n").unwrap();
    let out = modtune(&["tune", "--config", s(&bad), "--out", s(&w.path("x"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("mod.wat"), "{err}");
    assert!(!w.path("x").exists());
}

#[test]
fn usage_errors_exit_1() {
    let out = modtune(&["tune", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(modtune(&["--help"]).status.code(), Some(0));
    let w = Workspace::new();
    let out = modtune(&["tune", "--config", s(&w.config()), "--out", s(&w.path("x")), "--preset", "everything"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pretrain_tune_eval_generate() {
    let w = Workspace::new();
    let base = w.pretrain();
    let base_bytes = std::fs::read(&base).unwrap();

    // Reruns are byte-identical.
    let again = w.path("again");
    ok(&modtune(&["pretrain", "--config", s(&w.config()), "--out", s(&again)]));
    assert_eq!(std::fs::read(again.join("checkpoint.bin")).unwrap(), base_bytes);

    let tuned = w.path("tuned");
    let out = ok(&modtune(&[
        "tune",
        "--config",
        s(&w.config()),
        "--checkpoint",
        s(&base),
        "--out",
        s(&tuned),
        "--seed",
        "3",
        "--seed",
        "4",
        "--seed",
        "5",
    ]));
    let agg: Aggregate = serde_json::from_str(&out).unwrap();
    assert_eq!(agg.seeds, vec![3, 4, 5]);
    let losses = agg.final_train_loss.unwrap();
    assert_eq!(losses.values.len(), 3);
    let mean = losses.values.iter().sum::<f64>() / 3.0;
    assert!((losses.mean - mean).abs() < 1e-12);
    for seed in [3, 4, 5] {
        let dir = tuned.join(format!("seed-{seed}"));
        for f in ["checkpoint.bin", "checkpoint.json", "metrics.csv", "summary.json"] {
            assert!(dir.join(f).exists(), "{f} missing for seed {seed}");
        }
    }
    assert!(tuned.join("config.json").exists() && tuned.join("aggregate.json").exists());

    // Refuses to overwrite, then replaces with --force.
    let again = modtune(&["tune", "--config", s(&w.config()), "--checkpoint", s(&base), "--out", s(&tuned)]);
    assert_eq!(again.status.code(), Some(1));
    assert!(tuned.join("seed-5").exists());
    ok(&modtune(&["tune", "--config", s(&w.config()), "--checkpoint", s(&base), "--out", s(&tuned), "--force"]));
    assert!(!tuned.join("seed-5").exists() && tuned.join("seed-0").exists());

    // A tuned checkpoint is not a valid base.
    let ckpt = tuned.join("seed-0").join("checkpoint.bin");
    let out = modtune(&["tune", "--config", s(&w.config()), "--checkpoint", s(&ckpt), "--out", s(&w.path("t2"))]);
    assert_eq!(out.status.code(), Some(1));

    // Eval is side-effect free and its final route is the plain model's CE.
    let before = std::fs::read(&ckpt).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&ok(&modtune(&["eval", "--checkpoint", s(&ckpt), "--config", s(&w.config())]))).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), before);
    assert!(report["answer_accuracy"].as_f64().is_some());
    assert_eq!(report["record"]["routes"].as_array().unwrap().len(), 2);

    let base_report: serde_json::Value =
        serde_json::from_str(&ok(&modtune(&["eval", "--checkpoint", s(&base), "--config", s(&w.config())]))).unwrap();
    let routes = base_report["record"]["routes"].as_array().unwrap();
    let last = routes.last().unwrap()["loss"].as_f64().unwrap();
    assert!((last - base_report["record"]["loss_task"].as_f64().unwrap()).abs() < 1e-5);

    let gen: serde_json::Value = serde_json::from_str(&ok(&modtune(&[
        "generate",
        "--checkpoint",
        s(&ckpt),
        "--config",
        s(&w.config()),
        "--prompt",
        "12+3=",
        "--early-exit",
        "--top-k",
        "1",
    ])))
    .unwrap();
    assert_eq!(gen["completion"], gen["baseline_completion"]);
    assert!(gen["acceleration"]["layer_forward_ratio"].as_f64().unwrap() >= 1.0);
    let out = modtune(&["generate", "--checkpoint", s(&base), "--prompt", "1+1=", "--early-exit"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn params_percent_follows_the_preset() {
    let w = Workspace::new();
    let base = w.pretrain();
    let cfg = ModelConfig { n_layers: 4, d_model: 32, d_ff: 64, n_heads: 2, max_seq_len: 32, ..ModelConfig::toy() };
    let lora = modtune_core::LoraConfig::new(4);
    let per_layer = lora.per_layer_params(&cfg);
    let (d, k) = (32, 2);
    let reference = per_layer * (4 - k);
    for (preset, added) in [
        ("mod_only", d * k + 2 * d * k),
        ("lora_not_k", 0),
        ("lora_all", k * per_layer),
        ("lora_not_k_plus_mod", d * k + 2 * d * k),
        ("lora_all_plus_mod", k * per_layer + d * k + 2 * d * k),
    ] {
        let out = w.path(preset);
        ok(&modtune(&[
            "tune",
            "--config",
            s(&w.config()),
            "--checkpoint",
            s(&base),
            "--out",
            s(&out),
            "--preset",
            preset,
            "--max-steps",
            "1",
        ]));
        let summary: RunSummary =
            serde_json::from_str(&std::fs::read_to_string(out.join("seed-0/summary.json")).unwrap()).unwrap();
        assert_eq!(summary.reference_trainable_params, Some(reference), "{preset}");
        assert_eq!(summary.added_params, Some(added), "{preset}");
        let pct = 100.0 * added as f64 / reference as f64;
        assert!((summary.plus_params_pct.unwrap() - pct).abs() < 1e-12, "{preset}");
        assert_eq!(summary.mod_params, if preset.ends_with("mod") || preset == "mod_only" { d * k + 2 * d * k } else { 0 });
    }
}

#[test]
fn nan_exits_2_and_keeps_the_abort_record() {
    let w = Workspace::new();
    let base = w.pretrain();
    let (mut model, _) = checkpoint::load::<f32>(&base).unwrap();
    let id = model.params.id("lm_head.bias").unwrap();
    model.params.value_mut(id).data_mut()[0] = f32::NAN;
    let broken = w.path("broken.bin");
    checkpoint::save::<f32>(&broken, &model, None).unwrap();
    let out_dir = w.path("nan");
    let out = modtune(&["tune", "--config", s(&w.config()), "--checkpoint", s(&broken), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let records = read_metrics(&out_dir.join("seed-0/metrics.csv")).unwrap();
    assert_eq!(records.last().unwrap().split, "abort");
}

#[test]
fn sweep_grid_and_thread_cap() {
    let w = Workspace::new();
    let base = w.pretrain();
    let out = w.path("grid");
    ok(&modtune_env(
        &["sweep", "--config", s(&w.config()), "--checkpoint", s(&base), "--out", s(&out)],
        &[("MODTUNE_THREADS", "2")],
    ));
    let mut reader = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let rows: Vec<SweepRow> = reader.deserialize().map(Result::unwrap).collect();
    let cells: Vec<(usize, usize)> = rows.iter().map(|r| (r.k, r.top_k)).collect();
    assert_eq!(cells, vec![(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (3, 3)]);
    assert!(rows.iter().all(|r| r.dense == (r.k == r.top_k)));
    assert!(rows.iter().filter(|r| r.dense).all(|r| r.layer_ratio == Some(1.0)));

    let bad = modtune_env(&["sweep", "--config", s(&w.config()), "--out", s(&w.path("g2"))], &[("MODTUNE_THREADS", "0")]);
    assert_eq!(bad.status.code(), Some(1));
    let deep = w.path("deep.cfg");
    std::fs::write(&deep, format!("{TINY}sweep.max_k = 5\n").replace("sweep.max_k = 3\n", "")).unwrap();
    let out = modtune(&["sweep", "--config", s(&deep), "--out", s(&w.path("g3"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds"));
}

#[test]
fn gradcheck_passes() {
    let w = Workspace::new();
    let report = w.path("gc.json");
    ok(&modtune(&["gradcheck", "--out", s(&report)]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["negative_control_detected"], true);
}

#[test]
fn analyze_smooths_in_place() {
    let w = Workspace::new();
    let base = w.pretrain();
    let tuned = w.path("tuned");
    ok(&modtune(&["tune", "--config", s(&w.config()), "--checkpoint", s(&base), "--out", s(&tuned)]));
    let metrics = tuned.join("seed-0/metrics.csv");
    let out = w.path("smooth.csv");
    ok(&modtune(&["analyze", "--metrics", s(&metrics), "--out", s(&out)]));
    let raw = read_metrics(&metrics).unwrap();
    let smoothed = read_metrics(&out).unwrap();
    assert_eq!(raw.len(), smoothed.len());
    let evals: Vec<usize> = (0..raw.len()).filter(|&i| raw[i].split == "eval").collect();
    // Spot check against a hand-written truncated window.
    let i = evals[1];
    let expect = (raw[evals[0]].loss_task + raw[evals[1]].loss_task + raw[evals[2]].loss_task) / 3.0;
    assert!((smoothed[i].loss_task - expect).abs() < 1e-12);
    let first = (raw[evals[0]].loss_task + raw[evals[1]].loss_task) / 2.0;
    assert!((smoothed[evals[0]].loss_task - first).abs() < 1e-12);
    // Window 1 twice is the identity.
    let once = smooth_records(&raw, 1).unwrap();
    assert_eq!(smooth_records(&once, 1).unwrap(), raw);

    assert_eq!(modtune(&["analyze", "--metrics", s(&metrics), "--out", s(&out)]).status.code(), Some(1));
    let foreign = w.path("foreign.csv");
    std::fs::write(&foreign, "#schema=modtune.metrics/2\nstep,split\n").unwrap();
    assert_eq!(modtune(&["analyze", "--metrics", s(&foreign), "--out", s(&w.path("f.csv"))]).status.code(), Some(1));
}

#[test]
fn empty_corpus_is_rejected() {
    let w = Workspace::new();
    let corpus = w.path("empty.txt");
    std::fs::write(&corpus, "").unwrap();
    let cfg = w.path("text.cfg");
    std::fs::write(&cfg, format!("data.kind = text_corpus\ndata.path = {}\n", s(&corpus))).unwrap();
    let out = modtune(&["pretrain", "--config", s(&cfg), "--out", s(&w.path("p"))]);
    assert_eq!(out.status.code(), Some(1));
    let _ = TransformerModel::<f32>::new(ModelConfig::toy()).unwrap();
}
