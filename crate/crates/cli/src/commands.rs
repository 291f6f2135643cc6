use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use modflow::chem::{check_valency, parse_smiles, read_corpus, write_smiles, ValenceTable};
use modflow::graph::{extract_ring_vocabulary, AtomAlphabet, ClusterVocabulary, LabelMode, LabeledGraph};
use modflow::metrics::{
    compute_metrics, distribution_report, fit_property_regression, hist_csv, label_marginals,
    label_shuffled_validity, latent_ascent, reconstruction_rate, training_hashes, MetricsReport,
};
use modflow::model::{
    load_checkpoint, sample_topology, save_checkpoint, train, Checkpoint, EpochRecord, FlowSample, ModFlowModel,
    TrainState,
};
use modflow::toy::{pattern_corpus, run_toy, to_csv, to_pgm, GridPattern, ToyConfig};

use crate::config::RunConfig;

/// Failure of a command: usage errors exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CommandError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CommandError {
    fn from(e: anyhow::Error) -> Self {
        CommandError::Runtime(e)
    }
}

type CmdResult = std::result::Result<(), CommandError>;

fn usage<T>(msg: impl Into<String>) -> std::result::Result<T, CommandError> {
    Err(CommandError::Usage(msg.into()))
}

/// Existing input file named by `key`, or a usage error.
fn input_path(path: &Option<PathBuf>, key: &str) -> std::result::Result<PathBuf, CommandError> {
    match path {
        None => usage(format!("missing required setting {key}")),
        Some(p) if !p.is_file() => usage(format!("{key} file not found: {}", p.display())),
        Some(p) => Ok(p.clone()),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_echo(cfg: &RunConfig) -> Result<()> {
    write_file(&cfg.out.join("config.echo"), &cfg.echo())
}

fn atom_alphabet(cfg: &RunConfig, table: &ValenceTable) -> std::result::Result<AtomAlphabet, CommandError> {
    table
        .alphabet(&cfg.atoms)
        .or_else(|e| usage(format!("invalid atoms setting: {e}")))
}

fn load_molecules(path: &Path, cfg: &RunConfig, alphabet: &AtomAlphabet) -> Result<Vec<LabeledGraph>> {
    let corpus = read_corpus(path, cfg.format, alphabet)?;
    for e in &corpus.errors {
        eprintln!("warning: {}:{}: {}", path.display(), e.line, e.message);
    }
    if corpus.graphs.is_empty() {
        bail!("no usable molecules in {}", path.display());
    }
    Ok(corpus.graphs)
}

fn load_model(cfg: &RunConfig) -> std::result::Result<Checkpoint, CommandError> {
    let path = input_path(&cfg.checkpoint, "checkpoint")?;
    Ok(load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?)
}

fn resolve_vocab(cfg: &RunConfig, molecules: &[LabeledGraph]) -> Result<Option<ClusterVocabulary>> {
    if cfg.mode == LabelMode::Atom {
        return Ok(None);
    }
    if let Some(p) = cfg.vocab.as_ref().filter(|p| p.is_file()) {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let vocab = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        return Ok(Some(vocab));
    }
    let vocab = extract_ring_vocabulary(molecules, cfg.vocab_size);
    let target = cfg.vocab.clone().unwrap_or_else(|| cfg.out.join("vocab.json"));
    write_file(&target, &serde_json::to_string_pretty(&vocab)?)?;
    eprintln!("extracted {} ring clusters into {}", vocab.len(), target.display());
    Ok(Some(vocab))
}

pub fn cmd_train(cfg: &RunConfig) -> CmdResult {
    let data = input_path(&cfg.data, "data")?;
    let table = ValenceTable::standard();
    let atoms = atom_alphabet(cfg, &table)?;
    write_echo(cfg)?;
    let molecules = load_molecules(&data, cfg, &atoms)?;
    let (mut model, mut state) = match &cfg.resume {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            (ck.model, ck.state)
        }
        None => {
            let vocab = resolve_vocab(cfg, &molecules)?;
            let model = ModFlowModel::init(atoms, vocab, cfg.seed, cfg.solver, cfg.eps, cfg.dim)
                .map_err(anyhow::Error::from)?;
            let state = TrainState::new(model.params().len());
            (model, state)
        }
    };
    let corpus = model.prepare_corpus(&molecules).map_err(anyhow::Error::from)?;
    let loss_path = cfg.out.join("loss.csv");
    let mut loss_csv = format!("{}\n", EpochRecord::CSV_HEADER);
    write_file(&loss_path, &loss_csv)?;
    let ckpt_dir = cfg.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let echo = cfg.echo();
    let started = Instant::now();
    train(&mut model, &corpus, &cfg.train, &mut state, |rec, m, s| {
        loss_csv.push_str(&rec.csv_row());
        loss_csv.push('\n');
        fs::write(&loss_path, &loss_csv).map_err(|source| modflow::model::ModelError::Io {
            path: loss_path.clone(),
            source,
        })?;
        let ck = Checkpoint {
            model: m.clone(),
            state: s.clone(),
            config_echo: echo.clone(),
        };
        save_checkpoint(&ckpt_dir.join(format!("epoch_{}.mdfl", rec.epoch)), &ck)?;
        eprintln!(
            "epoch {} loss {:.4} nfe {:.1} ({:.1}s)",
            rec.epoch,
            rec.mean_loss,
            rec.nfe_mean,
            started.elapsed().as_secs_f64()
        );
        Ok(())
    })
    .map_err(anyhow::Error::from)?;
    Ok(())
}

/// Draws `count` molecules; molecule `i` uses its own random stream so the
/// output does not depend on the thread count.
fn generate_molecules(model: &ModFlowModel, corpus: &[FlowSample], count: usize, seed: u64) -> Result<Vec<LabeledGraph>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let topology = sample_topology(corpus, &mut rng)?;
            model.generate(&topology, &mut rng)
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(Into::into)
}

fn mw_values(graphs: &[LabeledGraph], alphabet: &AtomAlphabet, table: &ValenceTable) -> Vec<f64> {
    graphs
        .iter()
        .filter(|g| check_valency(g, alphabet, table).is_ok_and(|r| r.valid))
        .filter_map(|g| modflow::metrics::property_mw(g, alphabet, table).ok())
        .collect()
}

pub fn cmd_generate(cfg: &RunConfig) -> CmdResult {
    let data = input_path(&cfg.data, "data")?;
    let ck = load_model(cfg)?;
    write_echo(cfg)?;
    let model = ck.model;
    let table = ValenceTable::standard();
    let atoms = model.atoms().clone();
    let molecules = load_molecules(&data, cfg, &atoms)?;
    let corpus = model.prepare_corpus(&molecules).map_err(anyhow::Error::from)?;
    let started = Instant::now();
    let generated = generate_molecules(&model, &corpus, cfg.count, cfg.seed)?;
    let seconds = started.elapsed().as_secs_f64();
    let mut smi = String::new();
    for g in &generated {
        smi.push_str(&write_smiles(g, &atoms).map_err(anyhow::Error::from)?);
        smi.push('\n');
    }
    write_file(&cfg.out.join("generated.smi"), &smi)?;
    let mut report = MetricsReport::default();
    if !generated.is_empty() {
        let m = compute_metrics(&generated, &training_hashes(&molecules), &atoms, &table).map_err(anyhow::Error::from)?;
        report = MetricsReport::from_runs(&[m]);
        let skeletons: Vec<LabeledGraph> = molecules.iter().map(LabeledGraph::skeleton).collect();
        let baseline = label_shuffled_validity(&skeletons, &label_marginals(&molecules, atoms.len()), &atoms, &table)
            .map_err(anyhow::Error::from)?;
        report.push("percent", "shuffled_baseline_validity", baseline, 0.0);
        let per = seconds / generated.len() as f64;
        report.push("timing", "seconds_per_molecule", per, 0.0);
        eprintln!(
            "generated {} molecules: validity {:.1}% uniqueness {:.1}% novelty {:.1}% ({:.4} s/molecule)",
            m.samples, m.validity, m.uniqueness, m.novelty, per
        );
        let rows = distribution_report(
            "mw",
            &mw_values(&molecules, &atoms, &table),
            &mw_values(&generated, &atoms, &table),
            cfg.bins,
        );
        write_file(&cfg.out.join("hist.csv"), &hist_csv(&rows))?;
    }
    write_file(&cfg.out.join("metrics.csv"), &report.to_csv())?;
    Ok(())
}

pub fn cmd_encode(cfg: &RunConfig) -> CmdResult {
    let ck = load_model(cfg)?;
    let input = input_path(&cfg.input.clone().or_else(|| cfg.data.clone()), "input")?;
    write_echo(cfg)?;
    let model = ck.model;
    let molecules = load_molecules(&input, cfg, model.atoms())?;
    let corpus = model.prepare_corpus(&molecules).map_err(anyhow::Error::from)?;
    let encoded = corpus
        .par_iter()
        .map(|s| model.encode(s))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(anyhow::Error::from)?;
    let k = model.k();
    let mut out = String::from("molecule,node,logdet");
    for c in 0..k {
        out.push_str(&format!(",z{c}"));
    }
    out.push('\n');
    for (mi, e) in encoded.iter().enumerate() {
        for node in 0..e.z0.rows() {
            out.push_str(&format!("{mi},{node},{}", e.logdet[node]));
            for v in e.z0.row(node) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    write_file(&cfg.out.join("encoded.csv"), &out)?;
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> CmdResult {
    let data = input_path(&cfg.data, "data")?;
    let ck = load_model(cfg)?;
    let input = input_path(&cfg.input.clone().or_else(|| Some(cfg.out.join("generated.smi"))), "input")?;
    if let Some(h) = &cfg.heldout {
        input_path(&Some(h.clone()), "heldout")?;
    }
    write_echo(cfg)?;
    let model = ck.model;
    let table = ValenceTable::standard();
    let atoms = model.atoms().clone();
    let training = load_molecules(&data, cfg, &atoms)?;
    let generated = load_molecules(&input, cfg, &atoms)?;
    let m = compute_metrics(&generated, &training_hashes(&training), &atoms, &table).map_err(anyhow::Error::from)?;
    let mut report = MetricsReport::from_runs(&[m]);
    if let Some(h) = &cfg.heldout {
        let held = load_molecules(h, cfg, &atoms)?;
        let samples = model.prepare_corpus(&held).map_err(anyhow::Error::from)?;
        let rate = reconstruction_rate(&model, &samples).map_err(anyhow::Error::from)?;
        report.push("percent", "reconstruction", rate, 0.0);
    }
    eprintln!(
        "validity {:.1}% uniqueness {:.1}% novelty {:.1}%",
        m.validity, m.uniqueness, m.novelty
    );
    write_file(&cfg.out.join("metrics.csv"), &report.to_csv())?;
    let rows = distribution_report(
        "mw",
        &mw_values(&training, &atoms, &table),
        &mw_values(&generated, &atoms, &table),
        cfg.bins,
    );
    write_file(&cfg.out.join("hist.csv"), &hist_csv(&rows))?;
    Ok(())
}

pub fn cmd_optimize(cfg: &RunConfig) -> CmdResult {
    let data = input_path(&cfg.data, "data")?;
    let ck = load_model(cfg)?;
    if cfg.ascent_steps == 0 {
        return usage("ascent_steps must be at least 1");
    }
    write_echo(cfg)?;
    let model = ck.model;
    let table = ValenceTable::standard();
    let atoms = model.atoms().clone();
    let molecules = load_molecules(&data, cfg, &atoms)?;
    let prop = cfg.property;
    let (fit_mols, targets): (Vec<LabeledGraph>, Vec<f64>) = molecules
        .iter()
        .filter_map(|g| prop.eval(g, &atoms, &table).ok().map(|v| (g.clone(), v)))
        .unzip();
    let samples = model.prepare_corpus(&fit_mols).map_err(anyhow::Error::from)?;
    let fitted = fit_property_regression(&model, &samples, &targets, prop.name()).map_err(anyhow::Error::from)?;
    let start = match &cfg.molecule {
        Some(s) => parse_smiles(s, &atoms).map_err(|e| CommandError::Usage(format!("invalid molecule {s:?}: {e}")))?,
        None => molecules[0].clone(),
    };
    let start_sample = model.prepare(&start).map_err(anyhow::Error::from)?;
    let steps = latent_ascent(&model, &start_sample, &fitted, cfg.lambda, cfg.ascent_steps, &table, |g| {
        prop.eval(g, &atoms, &table).ok()
    })
    .map_err(anyhow::Error::from)?;
    let mut out = String::from("step,predicted,smiles,valid,property\n");
    let start_value = prop.eval(&start, &atoms, &table).ok();
    out.push_str(&format!(
        "0,{},{},true,{}\n",
        fitted.predict_latent(&model.encode(&start_sample).map_err(anyhow::Error::from)?.z0),
        write_smiles(&start, &atoms).map_err(anyhow::Error::from)?,
        start_value.map_or(String::new(), |v| v.to_string())
    ));
    for s in &steps {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.step,
            s.predicted,
            write_smiles(&s.molecule, &atoms).map_err(anyhow::Error::from)?,
            s.valid,
            s.property.map_or(String::new(), |v| v.to_string())
        ));
    }
    write_file(&cfg.out.join("optimized.csv"), &out)?;
    let mut report = MetricsReport::default();
    report.push("regression", &format!("{}_r2", prop.name()), fitted.r2, 0.0);
    report.push(
        "percent",
        "ascent_validity",
        100.0 * steps.iter().filter(|s| s.valid).count() as f64 / steps.len() as f64,
        0.0,
    );
    write_file(&cfg.out.join("metrics.csv"), &report.to_csv())?;
    eprintln!("{} regression R^2 {:.4}", prop.name(), fitted.r2);
    Ok(())
}

pub fn cmd_toy(cfg: &RunConfig) -> CmdResult {
    let pattern = match cfg.pattern.as_str() {
        "chessboard" => GridPattern::chessboard(cfg.grid, cfg.block),
        _ => GridPattern::stripes(cfg.grid, cfg.stripe_w),
    }
    .or_else(|e| usage(e.to_string()))?;
    if cfg.toy_samples == 0 {
        return usage("toy_samples must be at least 1");
    }
    write_echo(cfg)?;
    let toy = ToyConfig {
        steps: cfg.toy_steps,
        lr: cfg.toy_lr,
        samples: cfg.toy_samples,
        seed: cfg.seed,
        eps: cfg.eps,
        solver: cfg.solver,
    };
    let loss_path = cfg.out.join("loss.csv");
    let mut loss = format!("{}\n", EpochRecord::CSV_HEADER);
    let outcome = run_toy(&pattern, &toy, |r| {
        loss.push_str(&r.csv_row());
        loss.push('\n');
    })
    .map_err(|e| anyhow!(e))?;
    write_file(&loss_path, &loss)?;
    let name = pattern.name();
    let dir = cfg.out.join("toy");
    let n = pattern.n;
    write_file(
        &dir.join(format!("{name}_target.pgm")),
        &to_pgm(&pattern_corpus(&pattern)[0], n).map_err(|e| anyhow!(e))?,
    )?;
    for (i, g) in outcome.generated.iter().enumerate() {
        write_file(&dir.join(format!("{name}_sample_{i}.pgm")), &to_pgm(g, n).map_err(|e| anyhow!(e))?)?;
        write_file(&dir.join(format!("{name}_sample_{i}.csv")), &to_csv(g, n).map_err(|e| anyhow!(e))?)?;
    }
    let mut report = MetricsReport::default();
    report.push_runs("toy", &format!("{name}_accuracy"), &outcome.accuracies);
    write_file(&cfg.out.join("metrics.csv"), &report.to_csv())?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{name} accuracy {:.4}", outcome.mean_accuracy()).context("writing to stdout")?;
    Ok(())
}
