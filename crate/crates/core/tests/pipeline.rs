use std::fs;
use std::path::Path;
use std::process::Command;

use fmadapt::adapters::{budget, AdapterSpec, ParameterPartition};
use fmadapt::experiment::*;
use fmadapt::tasks::{generate_corpus, read_features, write_dataset, TaskKind};

fn tiny(task: TaskKind) -> RunConfig {
    let mut c = RunConfig::desk(task);
    c.schedule.pretrain_steps = 6;
    c.schedule.duration_pretrain_steps = 4;
    c.schedule.finetune_steps = 5;
    c.schedule.checkpoint_every = 3;
    c.schedule.encoder_fit_steps = 5;
    c.schedule.corpus_size = 24;
    c.schedule.batch_size = 2;
    c.solver.n_steps = 2;
    c
}

fn with_adapter(mut c: RunConfig) -> RunConfig {
    c.adapter = Some(AdapterSpec::desk());
    c
}

#[test]
fn zero_steps_writes_only_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(TaskKind::Emphasis);
    c.schedule.pretrain_steps = 0;
    c.schedule.duration_pretrain_steps = 0;
    let s = run_pretrain(&c, dir.path()).unwrap();
    assert_eq!(s.final_loss, None);
    let run = RunDir::open(dir.path());
    let initial = Checkpoint::load(run.periodic("acoustic", 0)).unwrap();
    let last = Checkpoint::load(run.acoustic()).unwrap();
    assert_eq!(initial.step, 0);
    assert_eq!(initial.to_bytes().unwrap(), last.to_bytes().unwrap());
    let ckpts: Vec<_> = fs::read_dir(dir.path().join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 1);
}

#[test]
fn pretraining_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(TaskKind::Emphasis);
    run_pretrain(&c, &dir.path().join("a")).unwrap();
    run_pretrain(&c, &dir.path().join("b")).unwrap();
    for f in [ACOUSTIC_CHECKPOINT, DURATION_CHECKPOINT] {
        assert_eq!(
            file_hash(dir.path().join("a").join(f)).unwrap(),
            file_hash(dir.path().join("b").join(f)).unwrap()
        );
    }
    let run = RunDir::open(dir.path().join("a"));
    assert_eq!(run.config().unwrap(), c);
    assert!(run.periodic("acoustic", 3).exists() && run.periodic("acoustic", 6).exists());
    let fp = fs::read_to_string(run.file("fingerprint.txt")).unwrap();
    assert_eq!(fp.trim(), c.fingerprint());
    let log = fs::read_to_string(run.file("loss.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
}

#[test]
fn pretraining_rejects_adapter_configs() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_pretrain(&with_adapter(tiny(TaskKind::Pause)), dir.path()).is_err());
}

#[test]
fn finetuning_keeps_frozen_parameters_and_counts_data() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    run_pretrain(&tiny(TaskKind::Burst), &base).unwrap();
    let mut c = with_adapter(tiny(TaskKind::Burst));
    c.schedule.data_fraction = 0.25;
    let s = run_finetune(&c, &base, &dir.path().join("ft"), false).unwrap();
    let n_train = finetune_corpus(&c).unwrap().train.len();
    assert_eq!(s.train_utterances, (n_train as f64 * 0.25).ceil() as usize);

    let base_ck = Checkpoint::load(base.join(ACOUSTIC_CHECKPOINT)).unwrap();
    let ft_dir = RunDir::open(dir.path().join("ft"));
    let mut checkpoints = vec![ft_dir.acoustic()];
    checkpoints.extend(
        fs::read_dir(ft_dir.root.join("checkpoints"))
            .unwrap()
            .map(|e| e.unwrap().path()),
    );
    for path in checkpoints {
        let ft = Checkpoint::load(&path).unwrap();
        assert!(ft.has_adapters());
        for (name, t) in base_ck.params.iter() {
            if ft.partition.is_frozen(name) {
                assert!(ft.params.get(name).unwrap().bit_eq(t), "{name} in {}", path.display());
            }
        }
    }
    // Adapted checkpoints cannot serve as a base.
    assert!(run_finetune(&c, &dir.path().join("ft"), &dir.path().join("again"), false).is_err());
}

#[test]
fn finetuning_refuses_foreign_base() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    run_pretrain(&tiny(TaskKind::Pause), &base).unwrap();
    let mut c = with_adapter(tiny(TaskKind::Pause));
    c.backbone.time_dim = 16;
    let err = run_finetune(&c, &base, &dir.path().join("ft"), false).unwrap_err();
    assert!(matches!(err, fmadapt::Error::FingerprintMismatch { .. }));
}

#[test]
fn generation_requests_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    let c = tiny(TaskKind::Emphasis);
    run_pretrain(&c, &base).unwrap();

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let s = run_generate(&c, &base, &empty, &dir.path().join("g0"), false).unwrap();
    assert_eq!((s.generated, s.rejected), (0, 0));
    assert_eq!(fs::read_to_string(dir.path().join("g0/manifest.jsonl")).unwrap(), "");

    let corpus = finetune_corpus(&c).unwrap();
    let prompt_dir = dir.path().join("data");
    write_dataset(&prompt_dir, &corpus).unwrap();
    let u = &corpus.train[0];
    let plain = RequestRecord {
        id: "a".into(),
        symbols: u.symbols.clone(),
        z_f: String::new(),
        durations: Some(u.aligned_durations()),
        prompt: None,
        seed: 9,
    };
    let reqs = vec![
        plain.clone(),
        RequestRecord {
            id: "b".into(),
            ..plain.clone()
        },
        RequestRecord {
            id: "c".into(),
            z_f: u.z_f(),
            ..plain.clone()
        },
        RequestRecord {
            id: "d".into(),
            durations: None,
            ..plain.clone()
        },
        RequestRecord {
            id: "e".into(),
            prompt: Some(PromptRef {
                features: format!("data/features/{}.bin", u.id),
                frames: 3,
            }),
            ..plain.clone()
        },
    ];
    let req_path = dir.path().join("req.jsonl");
    write_jsonl(&req_path, &reqs).unwrap();
    let out = dir.path().join("g1");
    let s = run_generate(&c, &base, &req_path, &out, false).unwrap();
    assert_eq!((s.generated, s.rejected), (4, 1));
    let manifest: Vec<GeneratedRecord> = read_jsonl(&out.join("manifest.jsonl")).unwrap();
    assert!(!manifest[2].ok && manifest[2].error.as_ref().unwrap().contains("adapters"));
    assert_eq!(
        fs::read(out.join("features/a.bin")).unwrap(),
        fs::read(out.join("features/b.bin")).unwrap()
    );
    assert_eq!(manifest[3].durations.len(), u.symbols.len());
    assert!(manifest[3].durations.iter().all(|&d| d >= 1));
    let prompted = read_features(out.join("features/e.bin")).unwrap();
    let source = read_features(prompt_dir.join(format!("features/{}.bin", u.id))).unwrap();
    for f in 0..3 {
        assert_eq!(prompted.row(f), source.row(f));
    }

    let records = run_evaluate(&out, &req_path, &c.task, &dir.path().join("ev")).unwrap();
    let missing = records
        .iter()
        .filter(|r| matches!(r, MetricRecord::Missing { .. }))
        .count();
    assert_eq!(missing, 1);
    let text = fs::read_to_string(dir.path().join("ev/metrics.jsonl")).unwrap();
    for line in text.lines() {
        serde_json::from_str::<MetricRecord>(line).unwrap();
    }
    match records.last().unwrap() {
        MetricRecord::Summary { evaluated, missing, .. } => assert_eq!((*evaluated, *missing), (4, 1)),
        r => panic!("{r:?}"),
    }
}

#[test]
fn gold_renders_score_perfectly() {
    // A "generation" directory that holds the gold features themselves.
    let dir = tempfile::tempdir().unwrap();
    for task in [TaskKind::Pause, TaskKind::Emphasis, TaskKind::Burst] {
        let c = tiny(task);
        let corpus = generate_corpus(&c.task, 60, 4).unwrap();
        let gen = dir.path().join(format!("gold-{}", task.name()));
        fs::create_dir_all(gen.join("features")).unwrap();
        let mut manifest = Vec::new();
        let mut reqs = Vec::new();
        for u in corpus.iter() {
            let rel = format!("features/{}.bin", u.id);
            fmadapt::tasks::write_features(gen.join(&rel), &u.features).unwrap();
            manifest.push(GeneratedRecord {
                id: u.id.clone(),
                ok: true,
                error: None,
                features: Some(rel),
                durations: u.aligned_durations(),
                z_f: u.z_f(),
            });
            reqs.push(RequestRecord {
                id: u.id.clone(),
                symbols: u.symbols.clone(),
                z_f: u.z_f(),
                durations: Some(u.aligned_durations()),
                prompt: None,
                seed: 0,
            });
        }
        write_jsonl(&gen.join("manifest.jsonl"), &manifest).unwrap();
        let req_path = gen.join("requests.jsonl");
        write_jsonl(&req_path, &reqs).unwrap();
        let records = run_evaluate(&gen, &req_path, &c.task, &gen.join("eval")).unwrap();
        assert!(summary_f1(&records).unwrap() >= 0.95, "{task:?}");
    }
}

#[test]
fn sweep_reports_closed_form_lora_counts() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    run_pretrain(&tiny(TaskKind::Pause), &base).unwrap();
    let mut c = with_adapter(tiny(TaskKind::Pause));
    c.adapter.as_mut().unwrap().kind = fmadapt::adapters::AdapterKind::Lora;
    let out = dir.path().join("sweep");
    let rows = run_sweep(&c, &base, SweepAxis::LoraRank, &[2.0, 8.0, 0.0], &out, false).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows[..2] {
        let rank = r.value as usize;
        let want = budget::lora_self_attention_params(c.backbone.n_layers, c.backbone.model_dim, rank);
        assert_eq!(r.adaptive_params, Some(want), "rank {rank}");
        assert!(r.f1.is_some());
    }
    assert!(rows[2].error.is_some());
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let jsonl: Vec<SweepRow> = read_jsonl(&out.join("sweep.jsonl")).unwrap();
    assert_eq!(jsonl, rows);

    // A single-value sweep reproduces the matching run.
    let single = run_sweep(&c, &base, SweepAxis::LoraRank, &[2.0], &dir.path().join("one"), false).unwrap();
    assert_eq!(single[0].f1, rows[0].f1);
    assert_eq!(single[0].trainable_params, rows[0].trainable_params);
}

#[test]
fn all_table_specs_share_one_base() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    run_pretrain(&tiny(TaskKind::Emphasis), &base).unwrap();
    let c = tiny(TaskKind::Emphasis);
    for (name, spec) in AdapterSpec::comparison_set(&AdapterSpec::desk()) {
        let mut cfg = c.clone();
        cfg.adapter = Some(spec.clone());
        let s = run_finetune(&cfg, &base, &dir.path().join(name), false).unwrap();
        assert_eq!(
            s.adaptive_params,
            budget::adaptive_params(&cfg.backbone, &spec),
            "{name}"
        );
        assert!(dir.path().join(name).join("summary.json").exists());
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fmadapt"))
}

fn write_config(path: &Path, c: &RunConfig) {
    fs::write(path, c.to_toml().unwrap()).unwrap();
}

#[test]
fn command_line_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(&d.join("pt.toml"), &tiny(TaskKind::Emphasis));
    write_config(&d.join("ft.toml"), &with_adapter(tiny(TaskKind::Emphasis)));
    let ok = |args: &[&str]| {
        let out = bin().args(args).current_dir(d).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    ok(&["corpus", "--config", "ft.toml", "--seed", "1", "--out", "data"]);
    assert!(d.join("data/manifest.jsonl").exists());
    let requests: Vec<RequestRecord> = read_jsonl(&d.join("data/heldout_requests.jsonl")).unwrap();
    let manifest = fs::read_to_string(d.join("data/manifest.jsonl")).unwrap();
    assert_eq!(
        requests.len(),
        manifest.lines().filter(|l| l.contains("\"heldout\"")).count()
    );
    assert!(!requests.is_empty());
    fs::copy(d.join("data/heldout_requests.jsonl"), d.join("req.jsonl")).unwrap();
    ok(&["pretrain", "--config", "pt.toml", "--seed", "1", "--out", "base"]);
    let ft = ok(&[
        "finetune",
        "--config",
        "ft.toml",
        "--seed",
        "1",
        "--out",
        "ft",
        "--base",
        "base",
        "--data-fraction",
        "0.5",
    ]);
    assert!(ft.contains("\"train_utterances\""));
    ok(&[
        "generate",
        "--config",
        "ft.toml",
        "--seed",
        "1",
        "--out",
        "gen",
        "--run",
        "ft",
        "--requests",
        "req.jsonl",
    ]);
    let ev = ok(&[
        "evaluate",
        "--config",
        "ft.toml",
        "--seed",
        "1",
        "--out",
        "ev",
        "--generated",
        "gen",
        "--requests",
        "req.jsonl",
    ]);
    assert!(ev.contains("\"summary\""));
    ok(&[
        "sweep",
        "--config",
        "ft.toml",
        "--seed",
        "1",
        "--out",
        "sw",
        "--base",
        "base",
        "--axis",
        "data-fraction",
        "--values",
        "0.5,1.0",
    ]);
    assert_eq!(fs::read_to_string(d.join("sw/sweep.csv")).unwrap().lines().count(), 3);

    // Conditioned requests against the base model are rejected with a non-zero exit.
    let out = bin()
        .args([
            "generate",
            "--config",
            "pt.toml",
            "--seed",
            "1",
            "--out",
            "gen-base",
            "--run",
            "base",
            "--requests",
            "req.jsonl",
        ])
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!out.status.success());
    // Unknown config keys fail.
    fs::write(
        d.join("bad.toml"),
        fs::read_to_string(d.join("pt.toml")).unwrap() + "\nbogus = 1\n",
    )
    .unwrap();
    let out = bin()
        .args(["pretrain", "--config", "bad.toml", "--seed", "1", "--out", "x"])
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn partition_of_pretrained_checkpoint_is_everything() {
    let dir = tempfile::tempdir().unwrap();
    run_pretrain(&tiny(TaskKind::Pause), dir.path()).unwrap();
    let ck = Checkpoint::load(dir.path().join(ACOUSTIC_CHECKPOINT)).unwrap();
    assert_eq!(ck.partition, ParameterPartition::all_trainable(&ck.params));
}
