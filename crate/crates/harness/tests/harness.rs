use std::path::Path;
use std::process::Command;

use bootvit::ablate::{apply_toggles, Toggles};
use bootvit::config::{RunConfig, Scheme};
use bootvit::curves::{collect_files, curves, load_series};
use bootvit::data::{load_cifar, subsample, synthetic, write_cifar10_dir, Flavor, Split};
use bootvit::metrics::{read_metrics, HEADER};
use bootvit::sweep::{sweep, Grid, SWEEP_HEADER};
use bootvit::train::{parameter_counts, train, train_on, Data};
use bootvit::verify::{fixture_config, fixture_data};
use bootvit::HarnessError;
use bootvit_core::checkpoint;

fn tiny(out: &Path, scheme: Scheme, epochs: usize) -> RunConfig {
    RunConfig {
        scheme,
        epochs,
        ..fixture_config(out.to_path_buf())
    }
}

#[test]
fn stratified_subsample_keeps_class_balance() {
    let labels: Vec<usize> = (0..50_000).map(|i| i % 10).collect();
    let idx = subsample(&labels, 10, 0.1, 3).unwrap();
    assert_eq!(idx.len(), 5000);
    let mut counts = [0; 10];
    for &i in &idx {
        counts[labels[i]] += 1;
    }
    assert_eq!(counts, [500; 10]);
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(subsample(&labels, 10, 0.1, 3).unwrap(), idx);
    assert_ne!(subsample(&labels, 10, 0.1, 4).unwrap(), idx);
    assert!(subsample(&labels[..20], 10, 0.1, 0).is_err());
}

#[test]
fn cifar_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train = synthetic(3, 10, 5);
    let test = synthetic(1, 10, 6);
    write_cifar10_dir(dir.path(), &train, &test).unwrap();
    assert_eq!(load_cifar(dir.path(), Flavor::Cifar10, Split::Train).unwrap(), train);
    assert_eq!(load_cifar(dir.path(), Flavor::Cifar10, Split::Test).unwrap(), test);
    std::fs::remove_file(dir.path().join("test_batch.bin")).unwrap();
    let err = load_cifar(dir.path(), Flavor::Cifar10, Split::Test).unwrap_err();
    assert!(matches!(err, HarnessError::Io { .. }));
}

#[test]
fn zero_epochs_writes_only_the_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_on(&tiny(dir.path(), Scheme::Joint, 0), &fixture_data()).unwrap();
    assert_eq!(o.records.len(), 1);
    let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].epoch, rows[0].step), (0, 0));
    assert!(rows[0].val_top1_vit.is_some() && rows[0].total.is_none());
}

#[test]
fn joint_run_writes_complete_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Scheme::Joint, 2);
    let o = train_on(&cfg, &fixture_data()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next(), Some(HEADER));
    let rows = read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows, o.records);
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), [0, 1, 2]);
    for r in &rows[1..] {
        assert!(r.feat_total.is_some() && r.mutual.is_some() && r.ce_vit.is_some() && r.ce_agent.is_some());
        assert_eq!(r.feat_per_layer.iter().map(|p| p.0).collect::<Vec<_>>(), [1, 2]);
        assert!(r.total.unwrap().is_finite());
    }
    assert!(rows[2].feat_weight_multiplier < rows[1].feat_weight_multiplier);
    assert_eq!(rows[1].feat_weight_multiplier, 1.0);
    for f in ["config.txt", "timings.csv", "summary.txt"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert!(!dir.path().join("last.ckpt").exists());
    assert_eq!(o.get("steps"), Some("8"));
    let back = bootvit::config::resolve(&[], Some(&std::fs::read_to_string(dir.path().join("config.txt")).unwrap())).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn checkpoints_carry_configuration_and_progress() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        checkpoints: true,
        ..tiny(dir.path(), Scheme::Shared, 1)
    };
    let o = train_on(&cfg, &fixture_data()).unwrap();
    let ck = checkpoint::load::<f32>(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(ck.meta.get("epoch").map(String::as_str), Some("1"));
    assert_eq!(ck.meta.get("cfg.scheme").map(String::as_str), Some("shared"));
    assert_eq!(ck.store.total().to_string(), o.get("params_total").unwrap());
    assert!(ck.optim.is_some());
}

#[test]
fn joint_without_loss_terms_reproduces_scratch_vit() {
    let data = fixture_data();
    let dir = tempfile::tempdir().unwrap();
    let scratch = train_on(&tiny(&dir.path().join("s"), Scheme::ScratchVit, 2), &data).unwrap();
    let mut cfg = tiny(&dir.path().join("j"), Scheme::Joint, 2);
    cfg.weights.alpha = 0.0;
    cfg.weights.beta = 0.0;
    let joint = train_on(&cfg, &data).unwrap();
    for (s, j) in scratch.records.iter().zip(&joint.records) {
        assert_eq!(s.ce_vit, j.ce_vit);
        assert_eq!(s.val_top1_vit, j.val_top1_vit);
        assert_eq!(s.train_top1_vit, j.train_top1_vit);
    }
    assert!(scratch.records[1].ce_agent.is_none() && joint.records[1].ce_agent.is_some());
}

#[test]
fn shared_scheme_has_fewer_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let joint = parameter_counts(&tiny(dir.path(), Scheme::Joint, 0)).unwrap();
    let shared = parameter_counts(&tiny(dir.path(), Scheme::Shared, 0)).unwrap();
    assert!(shared["total"] < joint["total"]);
    assert!(shared["shared"] > 0 && joint["shared"] == 0);
    let desk = |scheme| parameter_counts(&RunConfig { scheme, ..RunConfig::default() }).unwrap()["total"];
    assert!(desk(Scheme::Shared) < desk(Scheme::Joint));
    assert_eq!(desk(Scheme::ScratchVit) + desk(Scheme::ScratchAgent), desk(Scheme::Joint));
}

#[test]
fn ablation_toggles_show_in_metrics() {
    let data = fixture_data();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), Scheme::Joint, 2);
    apply_toggles(
        &mut cfg,
        &Toggles {
            no_decay: true,
            drop_layers: vec![1],
            ..Toggles::default()
        },
    )
    .unwrap();
    let o = train_on(&cfg, &data).unwrap();
    for r in &o.records {
        assert_eq!(r.feat_weight_multiplier, 1.0);
    }
    for r in &o.records[1..] {
        assert_eq!(r.feat_per_layer.iter().map(|p| p.0).collect::<Vec<_>>(), [2]);
    }
    assert_eq!(o.get("ablation"), Some("no-decay;drop-layer=1"));

    let mut cfg = tiny(&dir.path().join("nf"), Scheme::Joint, 1);
    apply_toggles(
        &mut cfg,
        &Toggles {
            no_feat: true,
            ..Toggles::default()
        },
    )
    .unwrap();
    let o = train_on(&cfg, &data).unwrap();
    let r = &o.records[1];
    assert!((r.total.unwrap() - cfg.weights.beta * r.mutual.unwrap()).abs() < 1e-6 * r.total.unwrap().abs().max(1.0));
}

#[test]
fn sweep_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(dir.path(), Scheme::Joint, 1);
    let grid = Grid {
        alpha: vec![0.0, 0.5, 1.0],
        beta: vec![1.0, 5.0, 10.0],
        temperature: Vec::new(),
    };
    let csv = sweep(&base, &grid, &fixture_data()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert_eq!(lines.len(), 10);
    assert!(lines[1].starts_with("0,1,4,"));
    assert_eq!(std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap(), csv);
    assert_eq!(collect_files(&[dir.path().to_path_buf()]).unwrap().len(), 9);
}

#[test]
fn curves_merge_runs() {
    let data = fixture_data();
    let dir = tempfile::tempdir().unwrap();
    train_on(&tiny(&dir.path().join("a"), Scheme::Joint, 2), &data).unwrap();
    train_on(&tiny(&dir.path().join("b"), Scheme::ScratchVit, 1), &data).unwrap();

    let single = curves(&[dir.path().join("a/metrics.csv")], &dir.path().join("one")).unwrap();
    assert_eq!(single.iter().map(|s| s.label.as_str()).collect::<Vec<_>>(), ["a/vit", "a/agent"]);
    assert_eq!(single[0].points.len(), 3);

    let both = curves(&[dir.path().to_path_buf()], &dir.path().join("two")).unwrap();
    assert_eq!(both.len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("two/curves.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,a/vit,a/agent,b/vit");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].ends_with(','), "{}", lines[3]);
    let svg = std::fs::read_to_string(dir.path().join("two/curves.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(curves(&[empty.path().to_path_buf()], &dir.path().join("x")), Err(HarnessError::Usage(_))));

    let bad = dir.path().join("bad.csv");
    let mut text = std::fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    text.push_str("3,12,oops,1,,,,,,,,1,1,0,\n");
    std::fs::write(&bad, text).unwrap();
    let err = load_series(&[bad]).unwrap_err().to_string();
    assert!(err.contains("line 5"), "{err}");
}

#[test]
fn nonfinite_loss_stops_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), Scheme::Joint, 3);
    cfg.optim.lr = 1e30;
    cfg.optim.weight_decay = 0.0;
    cfg.rule = bootvit_core::bootstrap::UpdateRule::Sgd;
    match train_on(&cfg, &fixture_data()) {
        Err(HarnessError::NonFinite { dump, .. }) => {
            let text = std::fs::read_to_string(dump).unwrap();
            assert!(text.contains("epoch = ") && (text.contains("total = ") || text.contains("error = ")), "{text}");
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with a huge step stayed finite"),
    }
}

#[test]
fn mislabelled_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), Scheme::ScratchVit, 1);
    cfg.arch.classes = 4;
    assert!(train_on(&cfg, &Data::new(synthetic(1, 6, 0), synthetic(1, 6, 1))).is_err());
}

#[test]
fn command_line_end_to_end() {
    let exe = env!("CARGO_BIN_EXE_bootvit");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let st = Command::new(exe)
        .args(["synth", "--out", data.to_str().unwrap(), "--train-per-class", "4", "--test-per-class", "1"])
        .status()
        .unwrap();
    assert!(st.success());
    let cfg_file = dir.path().join("run.cfg");
    std::fs::write(&cfg_file, "# file beats flags\nepochs = 1\nlayers = 1\nhidden = 18\nimage_size = 16\ncheckpoints = false\n").unwrap();
    let run_dir = dir.path().join("run");
    let out = Command::new(exe)
        .args(["train", "--config", cfg_file.to_str().unwrap(), "--epochs", "5", "--fraction", "1"])
        .args(["--scheme", "scratch-vit", "--data-dir", data.to_str().unwrap(), "--out-dir", run_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("epochs = 1"), "{stdout}");
    assert!(stdout.contains("train_images = 40"), "{stdout}");
    assert_eq!(read_metrics(&run_dir.join("metrics.csv")).unwrap().len(), 2);

    let out = Command::new(exe).args(["train", "--set", "bogus=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out = Command::new(exe).args(["inspect-phi", "--heads", "1", "--side", "2"]).output().unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), "# head 0 offset (0, 0) n 4\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n");

    let out = Command::new(exe)
        .args(["ablate", "--scheme", "scratch-vit", "--no-mutual", "--data-dir", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_reads_data_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    write_cifar10_dir(&dir.path().join("d"), &synthetic(10, 10, 0), &synthetic(1, 10, 1)).unwrap();
    let cfg = RunConfig {
        data_dir: dir.path().join("d"),
        fraction: 0.5,
        val_limit: 5,
        ..tiny(&dir.path().join("r"), Scheme::ScratchAgent, 1)
    };
    let o = train(&cfg).unwrap();
    assert_eq!(o.get("train_images"), Some("50"));
    assert_eq!(o.get("val_images"), Some("5"));
    assert_eq!(o.get("final_val_top1_vit"), Some("-"));
}
