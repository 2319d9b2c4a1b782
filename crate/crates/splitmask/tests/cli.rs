use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use splitmask::config::RunConfig;
use splitmask::sweep::SweepSpec;

const TINY: &[&str] = &[
    "data.n_train=16",
    "data.n_test=16",
    "model.image_size=16",
    "data.image_size=16",
    "model.patch_size=4",
    "model.embed_dim=16",
    "model.encoder_depth=2",
    "model.decoder_depth=1",
    "model.num_heads=2",
    "model.mlp_ratio=2",
    "model.vocab_size=16",
    "tokenizer.kmeans.sample_budget=500",
    "pretrain.epochs=2",
    "pretrain.batch_size=8",
    "finetune.epochs=2",
    "finetune.batch_size=8",
    "probe.epochs=3",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_splitmask"))
}

fn run(args: &[&str], extra: &[&str]) -> Output {
    let mut c = bin();
    c.args(args);
    for s in TINY.iter().chain(extra) {
        c.args(["--set", s]);
    }
    c.output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn pretrain_then_finetune_and_probe_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre");
    ok(&run(&["pretrain", "-o", path(&pre)], &[]));
    for f in ["config.toml", "vocab.pvoc", "metrics.csv", "final.smck", "eval.csv"] {
        assert!(pre.join(f).is_file(), "{}", f);
    }
    let resolved = fs::read_to_string(pre.join("config.toml")).unwrap();
    assert!(resolved.starts_with("# splitmask "));
    assert!(resolved.contains("embed_dim = 16"));
    assert_eq!(RunConfig::from_toml(&resolved, &[]).unwrap().model.embed_dim, 16);

    let ckpt = pre.join("final.smck");
    let ft = dir.path().join("ft");
    ok(&run(&["finetune", "--checkpoint", path(&ckpt), "-o", path(&ft)], &[]));
    let eval = fs::read_to_string(ft.join("eval.csv")).unwrap();
    assert!(eval.contains("finetune_best_top1"));

    let pr = dir.path().join("pr");
    ok(&run(&["probe", "--checkpoint", path(&ckpt), "-o", path(&pr)], &[]));
    let probe = fs::read_to_string(pr.join("probe.csv")).unwrap();
    assert_eq!(probe.lines().count(), 1 + 3, "{}", probe);
}

#[test]
fn reruns_give_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&run(&["pretrain", "-o", path(d)], &["seed=3"]));
        ok(&run(&["probe", "--checkpoint", path(&d.join("final.smck")), "-o", path(&d.join("probe"))], &["seed=3"]));
    }
    for f in ["metrics.csv", "eval.csv", "config.toml", "final.smck", "vocab.pvoc", "probe/probe.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f);
    }
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["pretrain", "-o", path(dir.path())], &["model.embed_dimm=3"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error kind=config code=2"), "{}", err);
    assert!(err.contains("model.embed_dimm"), "{}", err);
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn invalid_values_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["pretrain.masking.ratio=1.0", "model.embed_dim=15", "pretrain.loss.tau=-1", "model.mode=\"nope\""] {
        let out = run(&["pretrain", "-o", path(dir.path())], &[bad]);
        assert_eq!(out.status.code(), Some(2), "{}: {}", bad, String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn missing_manifest_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["pretrain", "-o", path(dir.path())],
        &["data.source=\"folder\"", "data.train_manifest=\"absent.tsv\"", "data.test_manifest=\"absent.tsv\""],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["finetune", "--checkpoint", "/nonexistent/x.smck", "-o", path(dir.path())], &[]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x.smck"));
}

#[test]
fn synth_export_trains_through_folder_source() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&run(&["synth", "-o", path(&data)], &[]));
    assert_eq!(fs::read_to_string(data.join("train.tsv")).unwrap().lines().count(), 16);
    let out = dir.path().join("run");
    let train = format!("data.train_manifest={:?}", path(&data.join("train.tsv")));
    let test = format!("data.test_manifest={:?}", path(&data.join("test.tsv")));
    ok(&run(&["pretrain", "-o", path(&out)], &["data.source=\"folder\"", &train, &test]));
    assert!(out.join("final.smck").is_file());
}

#[test]
fn fit_tokenizer_writes_a_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(&["fit-tokenizer", "-o", path(dir.path())], &["tokenizer.kind=\"random_projection\""]));
    let v = splitmask::formats::load_vocabulary(&dir.path().join("vocab.pvoc")).unwrap();
    assert_eq!((v.size(), v.dim()), (16, 48));
}

#[test]
fn plots_are_byte_identical_and_accept_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("probe.csv");
    fs::write(&csv, "tag,seed,layer,train_accuracy,test_accuracy\nsplitmask,0,0,0.5,0.4\n").unwrap();
    let mut svgs = Vec::new();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = bin()
            .args(["plot", "--kind", "probe_curve", "--input", path(&csv), "--out", path(&out)])
            .output()
            .unwrap();
        ok(&o);
        svgs.push(fs::read(out.join("probe_curve.svg")).unwrap());
    }
    assert_eq!(svgs[0], svgs[1]);
    assert!(String::from_utf8_lossy(&svgs[0]).contains("<circle"));
}

#[test]
fn plot_schema_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("x.csv");
    fs::write(&csv, "a,b\n1,2\n").unwrap();
    let o = bin()
        .args(["plot", "--kind", "loss_curve", "--input", path(&csv), "--out", path(dir.path())])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_resumes_without_rerunning_cells() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("sweep.toml");
    let set: Vec<String> = TINY.iter().map(|s| format!("{:?}", s)).collect();
    fs::write(
        &spec,
        format!(
            "stages = [\"pretrain\", \"probe\"]\nseeds = [0, 1]\nset = [{}]\n[axes]\n\"pretrain.epochs\" = [1, 2]\n",
            set.join(", ")
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let go = || bin().args(["sweep", "--spec", path(&spec), "--out", path(&out)]).output().unwrap();
    let first = go();
    ok(&first);
    assert!(String::from_utf8_lossy(&first.stdout).contains("4 cells, 4 run, 0 skipped, 0 failed"));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 5);
    let second = go();
    ok(&second);
    assert!(String::from_utf8_lossy(&second.stdout).contains("4 cells, 0 run, 4 skipped"));
    assert_eq!(fs::read_to_string(out.join("results.csv")).unwrap(), results);

    let plot = bin()
        .args(["plot", "--kind", "sweep_curve", "--input", path(&out.join("results.csv")), "--y", "probe_last_top1", "--out", path(&out)])
        .output()
        .unwrap();
    ok(&plot);
}

#[test]
fn failing_cell_does_not_stop_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("sweep.toml");
    let set: Vec<String> = TINY.iter().map(|s| format!("{:?}", s)).collect();
    fs::write(
        &spec,
        format!(
            "stages = [\"pretrain\"]\nset = [{}]\n[axes]\n\"data.train_manifest\" = [\"absent.tsv\"]\n\"data.source\" = [\"folder\", \"synth\"]\n",
            set.join(", ")
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = bin().args(["sweep", "--spec", path(&spec), "--out", path(&out)]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.matches(",failed,").count(), 1, "{}", results);
    assert_eq!(results.matches(",ok,").count(), 1, "{}", results);
}

#[test]
fn gradcheck_passes() {
    let o = bin().args(["gradcheck", "--seed", "1"]).output().unwrap();
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stdout).contains("splitmask_step"));
}

#[test]
fn shipped_configs_resolve() {
    let dir = configs_dir();
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(Some(&p), &[]).unwrap_or_else(|e| panic!("{}: {}", p.display(), e));
            seen += 1;
        }
    }
    assert!(seen >= 5);
    let full = RunConfig::load(Some(&dir.join("splitmask.toml")), &[]).unwrap();
    let inpaint = RunConfig::load(Some(&dir.join("split_inpaint.toml")), &[]).unwrap();
    let matching = RunConfig::load(Some(&dir.join("match_only.toml")), &[]).unwrap();
    assert_eq!((full.pretrain.loss.mim, full.pretrain.loss.nce), (1.0, 1.0));
    assert_eq!((inpaint.pretrain.loss.mim, inpaint.pretrain.loss.nce), (1.0, 0.0));
    assert_eq!((matching.pretrain.loss.mim, matching.pretrain.loss.nce), (0.0, 1.0));
    let small = RunConfig::load(Some(&dir.join("small_data.toml")), &[]).unwrap();
    assert_eq!(small.pretrain.masking.ratio, 0.75);
}

#[test]
fn shipped_sweeps_expand() {
    let dir = configs_dir().join("sweeps");
    for (name, cells) in [("fractions.toml", 9), ("epochs.toml", 9), ("ablations.toml", 9)] {
        let (spec, base) = SweepSpec::load(&dir.join(name)).unwrap();
        let c = spec.cells(&base, &[]).unwrap_or_else(|e| panic!("{}: {}", name, e));
        assert_eq!(c.len(), cells, "{}", name);
        let mut hashes: Vec<_> = c.iter().map(|c| c.hash.clone()).collect();
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), cells, "{}", name);
    }
    let (spec, base) = SweepSpec::load(&dir.join("ablations.toml")).unwrap();
    let weights: Vec<_> = spec.cells(&base, &[]).unwrap().iter().map(|c| (c.config.pretrain.loss.mim, c.config.pretrain.loss.nce)).collect();
    assert!(weights.contains(&(0.0, 1.0)) && weights.contains(&(1.0, 0.0)) && weights.contains(&(1.0, 1.0)));
    let (spec, base) = SweepSpec::load(&dir.join("fractions.toml")).unwrap();
    let epochs: Vec<_> = spec
        .cells(&base, &[])
        .unwrap()
        .iter()
        .map(|c| {
            let n = (c.config.data.n_train as f64 * c.config.data.fraction).round() as usize;
            splitmask::run::pretrain_epochs(&c.config, n).unwrap()
        })
        .collect();
    assert_eq!(epochs[0], 50);
    assert!(epochs.iter().any(|&e| e == 100) && epochs.iter().any(|&e| e >= 490));
}
