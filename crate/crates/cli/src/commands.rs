use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mmgpl::concepts::{fetch_concepts, FetchConfig};
use mmgpl::config::RunConfig;
use mmgpl::export;
use mmgpl::model::{Arm, Model};
use mmgpl::run::{load_model, read_meta, save_checkpoint, Prepared};
use mmgpl::synthgen::{write_dataset, SynthSpec};
use mmgpl::trainer::{evaluate_model, Experiment};
use mmgpl::{Error, Result};

use crate::{ConfigArgs, SubjectArgs};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, text).map_err(io(path))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("MMGPL_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("MMGPL_SEED={s:?} is not a non-negative integer"))),
        Err(_) => Ok(None),
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(path) = &args.config {
        cfg.merge_json(&fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?)?;
    }
    for set in &args.sets {
        let (key, value) = set
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {set:?} is not KEY=VALUE")))?;
        cfg.set_text(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required(flag: Option<PathBuf>, fallback: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or(fallback)
        .ok_or_else(|| Error::Config(format!("no {what} given (flag, config key or checkpoint sidecar)")))
}

pub fn gen_data(spec: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut s = SynthSpec::default();
    if let Some(seed) = env_seed()? {
        s.seed = seed;
    }
    if let Some(path) = spec {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{}: {e}", path.display()));
        let text = fs::read_to_string(&path).map_err(|e| bad(&e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(&e))?;
        // a seed in the file beats $MMGPL_SEED
        let env = s.seed;
        let has_seed = value.get("seed").is_some();
        s = serde_json::from_value(value).map_err(|e| bad(&e))?;
        if !has_seed {
            s.seed = env;
        }
    }
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let manifest = write_dataset(&s, &out)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn fetch(classes: &[String], k: usize, out: PathBuf, endpoint: Option<String>, args: &ConfigArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let fetch = FetchConfig {
        endpoint: endpoint.or(cfg.concept_endpoint),
        token: cfg.concept_token.or_else(|| std::env::var("MMGPL_CONCEPT_TOKEN").ok()),
        timeout: None,
    };
    let bank = fetch_concepts(&fetch, classes, k)?;
    bank.save(&out)?;
    println!("{}", out.display());
    Ok(())
}

pub fn train(args: &ConfigArgs, data: Option<PathBuf>, bank: Option<PathBuf>, out: Option<PathBuf>, print_config: bool) -> Result<()> {
    let mut cfg = resolve_config(args)?;
    if let Some(d) = &data {
        cfg.data = Some(d.clone());
    }
    if let Some(b) = &bank {
        cfg.bank = Some(b.clone());
    }
    if print_config {
        print!("{}", cfg.to_json());
        return Ok(());
    }
    let out = out.ok_or_else(|| Error::Config("--out is required".into()))?;
    let data = required(None, cfg.data.clone(), "--data")?;
    let bank = required(None, cfg.bank.clone(), "--bank")?;
    let prepared = Prepared::load(&data, &bank, &cfg)?;
    let mut model = prepared.model(&cfg, cfg.seed)?;
    let idx: Vec<usize> = (0..prepared.inputs.len()).collect();

    let mut log_name = out.as_os_str().to_owned();
    log_name.push(".log.jsonl");
    let log_path = PathBuf::from(log_name);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io(&log_path))?);
    let mut log_err = None;
    let epochs = mmgpl::trainer::train(&mut model, &prepared.inputs, &idx, &cfg.train, cfg.seed, |e| {
        if log_err.is_none() {
            let line = serde_json::to_string(e).expect("epoch record serializes");
            log_err = writeln!(log, "{line}").err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(io(&log_path)(e));
    }
    log.flush().map_err(io(&log_path))?;
    save_checkpoint(&model, &cfg, Some(&data), Some(&bank), &out)?;
    let (first, last) = (epochs[0].train_loss, epochs[epochs.len() - 1].train_loss);
    println!(
        "trained {} subjects for {} epochs (arm {}): loss {first:.4} -> {last:.4}; checkpoint {}",
        idx.len(),
        epochs.len(),
        cfg.model.arm.name(),
        out.display()
    );
    Ok(())
}

struct Loaded {
    model: Model,
    data: Prepared,
    cfg: RunConfig,
}

fn load(ckpt: &Path, data: Option<PathBuf>, bank: Option<PathBuf>) -> Result<Loaded> {
    let (meta, cfg) = read_meta(ckpt)?;
    let data_path = required(data, meta.data.clone(), "--data")?;
    let bank_path = required(bank, meta.bank.clone(), "--bank")?;
    let data = Prepared::load(&data_path, &bank_path, &cfg)?;
    if data.shapes != meta.shapes {
        return Err(Error::Data(format!(
            "dataset modalities {:?} differ from the checkpoint's {:?}",
            data.shapes, meta.shapes
        )));
    }
    let model = load_model(ckpt, &cfg, data.shapes.clone(), data.concepts.clone())?;
    Ok(Loaded { model, data, cfg })
}

pub fn eval(ckpt: PathBuf, data: Option<PathBuf>, bank: Option<PathBuf>) -> Result<()> {
    let l = load(&ckpt, data, bank)?;
    let idx: Vec<usize> = (0..l.data.inputs.len()).collect();
    let report = evaluate_model(&l.model, &l.data.inputs, &idx)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let m = report.metrics;
    println!("acc,auc,spe,sen,f1");
    println!("{},{},{},{},{}", m.acc, m.auc, m.spe, m.sen, m.f1);
    Ok(())
}

pub fn ablate(args: &ConfigArgs, data: Option<PathBuf>, bank: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let cfg = resolve_config(args)?;
    let data = required(data, cfg.data.clone(), "--data")?;
    let bank = required(bank, cfg.bank.clone(), "--bank")?;
    let prepared = Prepared::load(&data, &bank, &cfg)?;
    let exp = Experiment {
        data: &prepared.inputs,
        shapes: &prepared.shapes,
        concepts: &prepared.concepts,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        seed: cfg.seed,
    };
    let result = exp.run_ablation(&Arm::ALL)?;
    write(&out.join("runs.csv"), &result.runs_csv())?;
    let summary = result.summary_csv();
    write(&out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn subject(l: &Loaded, id: &str) -> Result<usize> {
    l.data
        .find(id)
        .ok_or_else(|| Error::Data(format!("subject {id:?} is not in the dataset")))
}

pub fn export_heatmap(sel: &SubjectArgs) -> Result<()> {
    let l = load(&sel.ckpt, sel.data.clone(), sel.bank.clone())?;
    let input = &l.data.inputs[subject(&l, &sel.subject)?];
    let p = l.model.predict(input)?;
    let weights = p.weights.ok_or_else(|| {
        Error::Config(format!("arm {} computes no token weights", l.cfg.model.arm.name()))
    })?;
    let files = export::export_heatmap(&weights, input, &l.data.shapes, &l.cfg.strategy(), &sel.out)?;
    println!("wrote {} files to {}", files.len(), sel.out.display());
    Ok(())
}

pub fn export_graph(sel: &SubjectArgs, threshold: f32) -> Result<()> {
    let l = load(&sel.ckpt, sel.data.clone(), sel.bank.clone())?;
    let input = &l.data.inputs[subject(&l, &sel.subject)?];
    let p = l.model.predict(input)?;
    let arm = l.cfg.model.arm.name();
    let a = p
        .adjacency
        .ok_or_else(|| Error::Config(format!("arm {arm} has no graph prompt")))?;
    let s = p.similarity.expect("graph arms compute similarity");
    let n = input.token_count();
    write(&sel.out.join("edges.csv"), &export::edges_csv(&a, n, threshold))?;
    write(
        &sel.out.join("similarity.csv"),
        &export::similarity_csv(&s, l.model.classes(), l.model.per_class()),
    )?;
    println!("{}", sel.out.display());
    Ok(())
}

pub fn export_flows(ckpt: PathBuf, data: Option<PathBuf>, bank: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let l = load(&ckpt, data, bank)?;
    let records = l
        .data
        .inputs
        .iter()
        .map(|i| Ok((i.label, l.model.predict(i)?)))
        .collect::<Result<Vec<_>>>()?;
    write(&out, &export::concept_flows_csv(&l.data.bank, &records))?;
    println!("{}", out.display());
    Ok(())
}
