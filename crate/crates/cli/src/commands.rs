use std::path::{Path, PathBuf};

use promptmad::bench::measure_latency;
use promptmad::checkpoint::load_checkpoint;
use promptmad::config::Config;
use promptmad::dataio::{generate_synthetic_corpus, load_corpus, write_corpus, CorpusIndex, ImageSample, Layout, Split, IMAGE_SIZE};
use promptmad::export::{write_heatmap_png, write_maps_npy};
use promptmad::metrics::{evaluate, AnomalyModel, OracleModel};
use promptmad::trainer::{run_ablation, run_training, slug, Trainer, CHECKPOINT_FILE, LOG_FILE};
use promptmad::{Error, Execution, Result};

use crate::manifest::RunManifest;
use crate::Common;

fn exec(c: &Common) -> Execution {
    if c.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn overrides(c: &Common) -> Vec<String> {
    let mut o = c.overrides.clone();
    if let Some(s) = c.seed {
        o.push(format!("train.seed={s}"));
    }
    o
}

/// File config (or defaults), then `--override`s, then `--seed`.
fn resolve_config(c: &Common) -> Result<Config> {
    match &c.config {
        Some(p) => Config::from_file(p, &overrides(c)),
        None => Config::from_toml_with_overrides("", &overrides(c)),
    }
}

/// A checkpoint's config with the command-line overrides applied on top.
fn rebase_config(base: &Config, c: &Common) -> Result<Config> {
    if c.config.is_some() {
        return Err(Error::Config("--config cannot be combined with a checkpoint; use --override".into()));
    }
    Config::from_toml_with_overrides(&base.to_toml(), &overrides(c))
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let d = c.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
    std::fs::create_dir_all(&d).map_err(|source| Error::Io { path: d.clone(), source })?;
    Ok(d)
}

fn corpus(c: &Common, m: &mut RunManifest) -> Result<CorpusIndex> {
    let root = c.data_root.as_ref().ok_or_else(|| Error::Config("--data-root is required".into()))?;
    let corpus = load_corpus(root, Layout::Mvtec, exec(c))?;
    let n = corpus.counts();
    log::info!("corpus {}: {} train, {} test, {} classes", root.display(), n.train, n.test, corpus.classes().len());
    m.data_root = Some(root.clone());
    m.corpus_fingerprint = Some(corpus.fingerprint());
    Ok(corpus)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn train(c: &Common, resume: Option<&Path>) -> Result<()> {
    let out = out_dir(c)?;
    let (cfg, trainer, mut m);
    match resume {
        Some(path) => {
            let ck = load_checkpoint(path, None)?;
            cfg = rebase_config(&ck.config, c)?;
            let mut same = cfg.clone();
            same.train.epochs = ck.config.train.epochs;
            if same != ck.config {
                return Err(Error::Config("resuming can only change train.epochs".into()));
            }
            m = RunManifest::start("train", &cfg, &overrides(c));
            let data = corpus(c, &mut m)?;
            trainer = Trainer::resume(&ck, &data, Some(cfg.train.epochs), exec(c))?;
            log::info!("resuming at epoch {} of {}", ck.epoch, cfg.train.epochs);
        }
        None => {
            cfg = resolve_config(c)?;
            m = RunManifest::start("train", &cfg, &overrides(c));
            let data = corpus(c, &mut m)?;
            trainer = Trainer::new(&cfg, &data, exec(c))?;
        }
    }
    let run = run_training(trainer, Some(&out))?;
    if run.frozen_before != run.frozen_after {
        return Err(Error::InvalidInput("frozen parameters changed during training".into()));
    }
    m.outputs = vec![out.join(CHECKPOINT_FILE), out.join(LOG_FILE)];
    m.finish(&out)?;
    println!("{}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

pub fn eval(c: &Common, checkpoint: Option<&Path>, oracle: bool) -> Result<()> {
    let out = out_dir(c)?;
    let (cfg, model): (Config, Box<dyn AnomalyModel>) = match checkpoint {
        Some(p) if !oracle => {
            let ck = load_checkpoint(p, None)?;
            (rebase_config(&ck.config, c)?, Box::new(ck.to_model()?))
        }
        _ => (resolve_config(c)?, Box::new(OracleModel)),
    };
    let mut m = RunManifest::start(if oracle { "eval --oracle" } else { "eval" }, &cfg, &overrides(c));
    let data = corpus(c, &mut m)?;
    let report = evaluate(model.as_ref(), &data, &cfg.eval, exec(c))?;
    let table = report.to_markdown();
    write(&out.join("report.md"), &table)?;
    write(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    m.outputs = vec![out.join("report.md"), out.join("report.json")];
    m.finish(&out)?;
    print!("{table}");
    Ok(())
}

pub fn infer(c: &Common, checkpoint: &Path, class: Option<&str>, split: &str) -> Result<()> {
    let out = out_dir(c)?;
    let ck = load_checkpoint(checkpoint, None)?;
    let cfg = rebase_config(&ck.config, c)?;
    let model = ck.to_model()?;
    let mut m = RunManifest::start("infer", &cfg, &overrides(c));
    let data = corpus(c, &mut m)?;
    if let Some(k) = class {
        if !data.classes().iter().any(|x| x == k) {
            return Err(Error::UnknownClass(k.to_string()));
        }
    }
    let want = match split {
        "test" => Some(Split::Test),
        "train" => Some(Split::Train),
        "all" => None,
        other => return Err(Error::Config(format!("--split must be test, train or all, not `{other}`"))),
    };
    let picked: Vec<&ImageSample> = data
        .samples()
        .iter()
        .map(|s| s.as_ref())
        .filter(|s| want.is_none_or(|w| s.split == w) && class.is_none_or(|k| s.class_id == k))
        .collect();
    let chunks: Vec<&[&ImageSample]> = picked.chunks(cfg.eval.batch_size.max(1)).collect();
    let maps: Vec<Vec<f32>> = exec(c).try_map(&chunks, |b| model.predict(b))?.into_iter().flatten().collect();
    let heat_dir = out.join("heatmaps");
    std::fs::create_dir_all(&heat_dir).map_err(|source| Error::Io { path: heat_dir.clone(), source })?;
    let mut outputs = vec![out.join("maps.npy"), out.join("samples.json")];
    for (s, map) in picked.iter().zip(&maps) {
        let p = heat_dir.join(format!("{}.png", slug(&s.id)));
        write_heatmap_png(&p, map, IMAGE_SIZE, IMAGE_SIZE)?;
        outputs.push(p);
    }
    write_maps_npy(&out.join("maps.npy"), &maps, IMAGE_SIZE, IMAGE_SIZE)?;
    let ids: Vec<&str> = picked.iter().map(|s| s.id.as_str()).collect();
    write(&out.join("samples.json"), &serde_json::to_string_pretty(&ids)?)?;
    log::info!("wrote {} maps to {}", maps.len(), out.display());
    m.outputs = outputs;
    m.finish(&out)?;
    Ok(())
}

pub fn synth_data(c: &Common, classes: usize, n_train: usize, n_test: usize) -> Result<()> {
    let out = out_dir(c)?;
    let cfg = resolve_config(c)?;
    let seed = c.seed.unwrap_or(0);
    let mut m = RunManifest::start("synth-data", &cfg, &overrides(c));
    let data = generate_synthetic_corpus(classes, n_train, n_test, seed, exec(c))?;
    write_corpus(&data, &out, exec(c))?;
    m.seed = seed;
    m.data_root = Some(out.clone());
    m.corpus_fingerprint = Some(data.fingerprint());
    m.outputs = data.classes().iter().map(|k| out.join(k)).collect();
    m.finish(&out)?;
    log::info!("wrote {} images to {}", data.samples().len(), out.display());
    Ok(())
}

pub fn ablate(c: &Common) -> Result<()> {
    let out = out_dir(c)?;
    let cfg = resolve_config(c)?;
    let mut m = RunManifest::start("ablate", &cfg, &overrides(c));
    let data = corpus(c, &mut m)?;
    let report = run_ablation(&cfg, &data, exec(c), Some(&out))?;
    let table = report.to_markdown();
    write(&out.join("ablation.md"), &table)?;
    write(&out.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
    m.outputs = vec![out.join("ablation.md"), out.join("ablation.json")];
    m.outputs.extend(report.rows.iter().map(|r| out.join(slug(&r.name))));
    m.finish(&out)?;
    print!("{table}");
    Ok(())
}

pub fn bench(c: &Common, checkpoint: &Path, n_samples: usize, warmup: usize) -> Result<()> {
    let ck = load_checkpoint(checkpoint, None)?;
    let cfg = rebase_config(&ck.config, c)?;
    let model = ck.to_model()?;
    let mut m = RunManifest::start("bench", &cfg, &overrides(c));
    let data = corpus(c, &mut m)?;
    let tests = data.test();
    let refs: Vec<&ImageSample> = tests.iter().map(|s| s.as_ref()).collect();
    let report = measure_latency(&model, &refs, n_samples, warmup)?;
    print!("{}", report.to_markdown());
    if c.out.is_some() {
        let out = out_dir(c)?;
        write(&out.join("bench.json"), &serde_json::to_string_pretty(&report)?)?;
        m.outputs = vec![out.join("bench.json")];
        m.finish(&out)?;
    }
    Ok(())
}
