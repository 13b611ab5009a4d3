use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use tsam_core::checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
use tsam_core::data::{
    load_dataset, synth_generate, write_dataset, Dataset, SynthConfig, BANK_MAGIC,
};
use tsam_core::evaluator::{dump_scores, evaluate_with, queries};
use tsam_core::experiments::{ablate, provenance, sweep, table, ExperimentRow};
use tsam_core::trainer::{CheckpointTarget, LOG_HEADER};
use tsam_core::{Error, FormatError, Model, Result, RunConfig, Split, TokenBank, Trainer};

use crate::Command;

/// `print!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {
        emit(format_args!($($t)*))
    };
}

macro_rules! sayln {
    ($($t:tt)*) => {
        emit(format_args!("{}\n", format_args!($($t)*)))
    };
}

fn emit(args: std::fmt::Arguments<'_>) {
    let _ = std::io::stdout().lock().write_fmt(args);
}

pub fn run(cmd: Command, overrides: &[(String, String)]) -> Result<()> {
    match cmd {
        Command::Train { config } => train(config.as_deref(), overrides),
        Command::Eval {
            checkpoint,
            split,
            raw,
            filtered: _,
            out,
            dump_scores,
        } => eval(
            &checkpoint,
            &split,
            !raw,
            out,
            dump_scores.as_deref(),
            overrides,
        ),
        Command::Ablate {
            config,
            split,
            out_dir,
        } => cmd_ablate(config.as_deref(), &split, out_dir.as_deref(), overrides),
        Command::Sweep {
            config,
            taus,
            ks,
            split,
            out,
        } => cmd_sweep(
            config.as_deref(),
            &taus,
            &ks,
            &split,
            out.as_deref(),
            overrides,
        ),
        Command::Synth {
            out,
            entities,
            relations,
            triples,
            tokens,
            token_dim,
            seed,
        } => {
            no_overrides("synth", overrides)?;
            synth(
                &out,
                SynthConfig {
                    entity_count: entities,
                    relation_count: relations,
                    triple_count: triples,
                    tokens_per_modality: tokens,
                    token_dim,
                    seed,
                },
            )
        }
        Command::Inspect {
            path,
            dump_embeddings,
        } => inspect(&path, dump_embeddings.as_deref(), overrides),
    }
}

fn no_overrides(cmd: &str, overrides: &[(String, String)]) -> Result<()> {
    match overrides.first() {
        Some((k, _)) => Err(Error::Config(format!(
            "{cmd} takes no config overrides (got --{k})"
        ))),
        None => Ok(()),
    }
}

fn resolve(config: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env_seed()?;
    cfg.apply_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    Ok(cfg)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn build(cfg: &RunConfig, data: &Dataset) -> Result<(Model, tsam_core::ParamStore)> {
    Model::new(
        cfg.model.clone(),
        data.store.entity_count(),
        data.store.relation_count(),
        data.visual.as_ref(),
        data.textual.as_ref(),
        cfg.train.seed,
    )
}

fn commented(cfg: &RunConfig) -> String {
    let mut s = format!("# config_hash = {:016x}\n", cfg.hash());
    for line in cfg.to_text().lines() {
        let _ = writeln!(s, "# {line}");
    }
    s
}

fn train(config: Option<&Path>, overrides: &[(String, String)]) -> Result<()> {
    let cfg = resolve(config, overrides)?;
    let data = load_dataset(&cfg.data_dir)?;
    let (model, params) = build(&cfg, &data)?;
    let mut trainer = Trainer::new(model, params, &data.store, cfg.train.clone())?;

    if let Some(dir) = cfg.log.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(&cfg.log).map_err(|e| Error::io(&cfg.log, e))?;
    let mut log = BufWriter::new(file);
    log.write_all(commented(&cfg).as_bytes())
        .map_err(|e| Error::io(&cfg.log, e))?;
    let target = CheckpointTarget {
        path: cfg.checkpoint.clone(),
        config_text: cfg.to_text(),
    };
    let report = trainer.fit(Some(&target), Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&cfg.log, e))?;

    let last = report.history.last().expect("at least one epoch");
    sayln!(
        "trained {} epochs: final L = {:.6}, best valid MRR {:.4} at epoch {}",
        report.history.len(),
        last.stats.total,
        report.best_valid_mrr,
        report.best_epoch
    );
    sayln!("checkpoint: {}", cfg.checkpoint.display());
    sayln!("log: {}", cfg.log.display());
    sayln!("config_hash: {:016x}", cfg.hash());
    Ok(())
}

/// Rebuilds the model stored in a checkpoint, with its dataset.
fn restore(
    ck: &Checkpoint,
    overrides: &[(String, String)],
) -> Result<(RunConfig, Dataset, Model, tsam_core::ParamStore)> {
    let mut cfg = RunConfig::parse(&ck.config_text, "checkpoint config")?;
    cfg.apply_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let data = load_dataset(&cfg.data_dir)?;
    let (model, mut params) = build(&cfg, &data)?;
    ck.restore_into(&mut params)?;
    Ok((cfg, data, model, params))
}

fn eval(
    path: &Path,
    split: &str,
    filtered: bool,
    out: Option<PathBuf>,
    dump: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<()> {
    let split: Split = split.parse()?;
    let ck = Checkpoint::load(path)?;
    let (_, data, model, params) = restore(&ck, overrides)?;
    if !params.all_finite() {
        return Err(Error::Numeric(
            "checkpoint parameters are not finite".into(),
        ));
    }
    let scorer = model.scorer(&params)?;
    let mut all_scores = Vec::new();
    let eval = evaluate_with(&data.store, split, filtered, |q| {
        let s = scorer.score(q)?;
        if dump.is_some() {
            all_scores = s.clone();
        }
        Ok(s)
    })?;
    say!("{}", eval.metrics.report());
    let setting = if filtered { "filtered" } else { "raw" };
    let out = out.unwrap_or_else(|| {
        let mut p = path.as_os_str().to_owned();
        p.push(format!(".{split}.{setting}.metrics"));
        PathBuf::from(p)
    });
    write_file(&out, &eval.metrics.to_kv())?;
    sayln!("metrics: {}", out.display());
    if let Some(d) = dump {
        debug_assert_eq!(all_scores.len(), queries(&data.store, split).len());
        write_file(d, &dump_scores(&eval, &all_scores))?;
        sayln!("scores: {}", d.display());
    }
    Ok(())
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect::<String>()
        .replace("w_o_", "wo_")
}

fn history_log(row: &ExperimentRow) -> String {
    let mut s = format!(
        "# config_hash = {:016x}\n# seed = {}\n{LOG_HEADER}\n",
        row.config_hash, row.seed
    );
    for e in &row.history {
        let _ = writeln!(s, "{}", e.line());
    }
    s
}

fn cmd_ablate(
    config: Option<&Path>,
    split: &str,
    out_dir: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<()> {
    let split: Split = split.parse()?;
    let cfg = resolve(config, overrides)?;
    let data = load_dataset(&cfg.data_dir)?;
    let rows = ablate(&cfg, &data, split)?;
    let report = format!(
        "{}\n{}",
        table(&format!("ablation ({split} split, filtered)"), &rows),
        provenance(&rows)
    );
    say!("{report}");
    if let Some(dir) = out_dir {
        write_file(&dir.join("ablation.txt"), &report)?;
        for r in &rows {
            write_file(
                &dir.join(format!("{}.log", slug(&r.label))),
                &history_log(r),
            )?;
        }
    }
    Ok(())
}

fn cmd_sweep(
    config: Option<&Path>,
    taus: &[f64],
    ks: &[usize],
    split: &str,
    out: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<()> {
    let split: Split = split.parse()?;
    let cfg = resolve(config, overrides)?;
    let data = load_dataset(&cfg.data_dir)?;
    let r = sweep(&cfg, &data, taus, ks, split)?;
    let report = format!(
        "{}\n{}\n{}{}",
        table(&format!("temperature (K = {})", cfg.train.sacl.k), &r.tau),
        table(&format!("negatives (tau = {})", cfg.train.sacl.tau), &r.k),
        provenance(&r.tau),
        provenance(&r.k)
    );
    say!("{report}");
    if let Some(p) = out {
        write_file(p, &report)?;
    }
    Ok(())
}

fn synth(out: &Path, cfg: SynthConfig) -> Result<()> {
    let ds = synth_generate(&cfg)?;
    write_dataset(&ds, out)?;
    let (tr, va, te) = cfg.split_sizes();
    sayln!("wrote {} entities, {} relations, {tr}/{va}/{te} train/valid/test triples and two token banks to {}",
        cfg.entity_count,
        cfg.relation_count,
        out.display()
    );
    Ok(())
}

fn stats(values: &[f32]) -> String {
    if values.is_empty() {
        return "empty".into();
    }
    let (mut lo, mut hi, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v as f64;
    }
    format!(
        "min {lo:.6} max {hi:.6} mean {:.6}",
        sum / values.len() as f64
    )
}

fn describe_bank(b: &TokenBank) -> String {
    let mut s = format!(
        "token bank\nmodality: {}\ndim: {}\nentity_count: {}\n",
        b.modality(),
        b.dim(),
        b.len()
    );
    let counts: Vec<usize> = b
        .entries()
        .iter()
        .map(|e| e.tokens.len() / b.dim())
        .collect();
    if let (Some(min), Some(max)) = (counts.iter().min(), counts.iter().max()) {
        let total: usize = counts.iter().sum();
        let _ = writeln!(s, "tokens per entity: min {min} max {max} total {total}");
    }
    let all: Vec<f32> = b
        .entries()
        .iter()
        .flat_map(|e| e.tokens.iter().copied())
        .collect();
    let _ = writeln!(s, "values: {}", stats(&all));
    s
}

fn describe_checkpoint(ck: &Checkpoint) -> String {
    let mut s = format!(
        "checkpoint\nversion: {}\nepoch: {}\nconfig_hash: {:016x}\nbest_valid_mrr: {:.6}\nadam_step: {}\nparameters: {} tensors, {} values\n",
        tsam_core::checkpoint::CHECKPOINT_VERSION,
        ck.epoch,
        ck.config_hash(),
        ck.best_valid_mrr,
        ck.adam.step,
        ck.params.len(),
        ck.params.numel()
    );
    for (_, name, t) in ck.params.iter() {
        let _ = writeln!(s, "  {name} {:?}: {}", t.shape(), stats(t.data()));
    }
    s
}

fn inspect(path: &Path, dump: Option<&Path>, overrides: &[(String, String)]) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt_err = |source: FormatError| Error::Format {
        path: path.to_path_buf(),
        source,
    };
    let magic: [u8; 4] = bytes
        .get(..4)
        .and_then(|m| m.try_into().ok())
        .ok_or_else(|| {
            fmt_err(FormatError::Truncated {
                offset: 0,
                needed: 4 - bytes.len().min(4),
            })
        })?;
    if magic == BANK_MAGIC {
        if dump.is_some() {
            return Err(Error::Config("--dump-embeddings needs a checkpoint".into()));
        }
        let bank = TokenBank::from_bytes(&bytes).map_err(fmt_err)?;
        say!("{}", describe_bank(&bank));
        return Ok(());
    }
    if magic != CHECKPOINT_MAGIC {
        return Err(fmt_err(FormatError::BadMagic {
            found: magic,
            expected: CHECKPOINT_MAGIC,
        }));
    }
    let ck = Checkpoint::from_bytes(&bytes).map_err(fmt_err)?;
    say!("{}", describe_checkpoint(&ck));
    if let Some(out) = dump {
        let (_, data, model, params) = restore(&ck, overrides)?;
        let scorer = model.scorer(&params)?;
        let e_f = scorer.fused();
        let mut s = String::from("# entity\tname\tweights(str,vis,txt)\tfused vector\n");
        for (i, name) in data.store.entity_names().iter().enumerate() {
            let w = scorer
                .weights()
                .map(|w| {
                    w.row(i)
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .unwrap_or_else(|| "-".into());
            let v: Vec<String> = e_f.row(i).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{i}\t{name}\t{w}\t{}", v.join(" "));
        }
        write_file(out, &s)?;
        sayln!("embeddings: {}", out.display());
    }
    Ok(())
}
