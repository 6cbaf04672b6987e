use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use pointtree::data::{self, ShapeSpec, SPLIT_NAMES};
use pointtree::ead::{ead_exact, ead_mc, EadEstimate};
use pointtree::geometry::PointCloud;
use pointtree::io::{self, MetricsRow};
use pointtree::model::{self, Model, Task, TrainConfig};
use pointtree::sampler::{derive_seed, transform_dataset, Record, TransformDistribution};
use pointtree::{autodiff, kdtree, pca};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::*;

/// Error raised by the command line itself rather than the library.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Runs the command, writing data to `stdout` after the config line.
pub fn run(cli: &mut Cli, stdout: &mut dyn Write) -> Result<()> {
    // commands whose defaults depend on the data resolve them before the config line
    let train_data = match &mut cli.command {
        Command::Train(a) => Some(resolve_model(&mut a.model, &a.data, "train")?),
        Command::Eval(a) => Some(resolve_model(&mut a.model, &a.data, &a.split)?),
        _ => None,
    };
    writeln!(stdout, "{}", cli.config_line())?;
    let cli = &*cli;
    match &cli.command {
        Command::Prealign(a) => {
            let cloud = io::read_cloud(&a.input)?;
            let out = if a.iterative {
                pca::iterative_prealign(&cloud, a.max_iter)?.cloud
            } else {
                pca::prealign(&cloud)?
            };
            emit_cloud(cli, &out, stdout)
        }
        Command::Tree(a) => {
            let mut cloud = io::read_cloud(&a.input)?;
            if a.pad {
                cloud = data::pad_to_pow2(&cloud, cli.seed);
            }
            let tree = kdtree::build(&cloud, a.rule.into())?;
            emit_text(cli, &tree.dump(), stdout)
        }
        Command::Ead(a) => {
            let p = io::read_cloud(&a.a)?;
            let q = io::read_cloud(&a.b)?;
            let e = if a.exact {
                ead_exact(&p, &q)?
            } else {
                ead_mc(&p, &q, a.samples, cli.seed)?
            };
            emit_text(cli, &format!("{:.6e} {:.6e}\n", e.value, e.stderr), stdout)
        }
        Command::Transform(a) => transform(cli, a, stdout),
        Command::Generate(a) => {
            let out = require_out(cli)?;
            let &[train, val, test] = a.counts.as_slice() else {
                bail!(usage("--counts takes three comma-separated sizes"));
            };
            let counts = [train, val, test];
            let splits = data::benchmark(a.benchmark, counts, a.points, a.noise, cli.seed)?;
            let mut summary = String::from("split\trecords\n");
            for name in SPLIT_NAMES {
                let records = splits.get(name).expect("known split");
                io::write_dataset(&io::split_dir(out, name), records)?;
                let _ = writeln!(summary, "{name}\t{}", records.len());
            }
            stdout.write_all(summary.as_bytes())?;
            Ok(())
        }
        Command::Shape(a) => {
            let cloud = data::generate(ShapeSpec::new(a.kind, a.points, cli.seed).with_noise(a.noise))?;
            emit_cloud(cli, &cloud, stdout)
        }
        Command::EadTable(a) => ead_table(cli, a, stdout),
        Command::Train(a) => {
            let out = require_out(cli)?;
            let (train_set, val_set) = train_data.expect("resolved above");
            let tc = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                adam: autodiff::AdamConfig {
                    lr: a.lr,
                    ..Default::default()
                },
                patience: a.patience,
                seed: cli.seed,
            };
            let outcome = model::train(&a.model.config(), &tc, &train_set, &val_set)?;
            outcome.model.params.save(out)?;
            stdout.write_all(io::metrics_tsv(&outcome.metrics).as_bytes())?;
            Ok(())
        }
        Command::Eval(a) => {
            let (records, _) = train_data.expect("resolved above");
            let mut m = Model::new(a.model.config(), 0)?;
            let saved = autodiff::ParamStore::load(&a.checkpoint)?;
            m.params
                .assign_from(&saved)
                .with_context(|| format!("checkpoint {} does not fit the model flags", a.checkpoint.display()))?;
            let prepared = model::prepare_all(&m, &records, derive_seed(cli.seed, &[2]))?;
            let r = model::evaluate(&m, &prepared, 16)?;
            let row = MetricsRow {
                epoch: 0,
                split: a.split.clone(),
                loss: r.loss,
                accuracy: r.accuracy,
                miou: r.miou,
            };
            emit_text(cli, &io::metrics_tsv(&[row]), stdout)
        }
    }
}

/// Reads the data a model command needs and fills data-dependent defaults.
/// Returns the named split and, for training, the validation split.
fn resolve_model(m: &mut ModelArgs, root: &Path, split: &str) -> Result<(Vec<Record>, Vec<Record>)> {
    if m.cls_hidden.len() != 2 {
        bail!(usage("--cls-hidden takes two comma-separated widths"));
    }
    if !SPLIT_NAMES.contains(&split) {
        bail!(usage(format!(
            "unknown split {split:?}; expected one of {SPLIT_NAMES:?}"
        )));
    }
    let read = |s: &str| {
        let dir = io::split_dir(root, s);
        io::read_dataset(&dir).with_context(|| format!("reading dataset {}", dir.display()))
    };
    let first = read(split)?;
    let val = if split == "train" { read("val")? } else { Vec::new() };
    let classes = first
        .iter()
        .map(|r| r.class_label as usize + 1)
        .max()
        .unwrap_or(0)
        .max(2);
    let parts = first
        .iter()
        .filter_map(|r| r.cloud.labels())
        .flat_map(|l| l.iter().map(|&x| x as usize + 1))
        .max()
        .unwrap_or(0)
        .max(2);
    m.resolve(classes, parts);
    if m.config().task == Task::Segment && first.iter().any(|r| r.cloud.labels().is_none()) {
        bail!(usage("segmentation needs per-point labels in every cloud"));
    }
    Ok((first, val))
}

fn require_out(cli: &Cli) -> Result<&Path> {
    if cli.out.as_os_str() == "-" {
        bail!(usage("this command writes files; pass --out <path>"));
    }
    Ok(&cli.out)
}

fn emit_cloud(cli: &Cli, cloud: &PointCloud, stdout: &mut dyn Write) -> Result<()> {
    if cli.out.as_os_str() == "-" {
        if cli.format == io::Format::Ptc1 {
            bail!(usage("binary ptc1 output needs --out <path>"));
        }
        stdout.write_all(&io::encode_cloud(cloud, cli.format))?;
    } else {
        io::write_cloud(&cli.out, cloud, cli.format)?;
    }
    Ok(())
}

fn emit_text(cli: &Cli, text: &str, stdout: &mut dyn Write) -> Result<()> {
    if cli.out.as_os_str() == "-" {
        stdout.write_all(text.as_bytes())?;
    } else {
        std::fs::write(&cli.out, text)?;
    }
    Ok(())
}

fn distribution(kind: pointtree::DistributionKind, candidates: usize) -> TransformDistribution {
    TransformDistribution::new(kind).with_candidates(candidates)
}

fn transform(cli: &Cli, a: &TransformArgs, stdout: &mut dyn Write) -> Result<()> {
    let out = require_out(cli)?;
    let dist = distribution(a.dist, a.candidates);
    // a flat dataset has its own manifest; otherwise transform each split below the root
    let jobs: Vec<(Option<&str>, u64)> = if a.input.join(io::MANIFEST).exists() {
        vec![(None, cli.seed)]
    } else {
        SPLIT_NAMES
            .iter()
            .enumerate()
            .filter(|(_, s)| io::split_dir(&a.input, s).join(io::MANIFEST).exists())
            .map(|(i, s)| (Some(*s), derive_seed(cli.seed, &[i as u64])))
            .collect()
    };
    if jobs.is_empty() {
        bail!(usage(format!(
            "{} holds no {} and no split directories",
            a.input.display(),
            io::MANIFEST
        )));
    }
    let mut summary = String::from("split\trecords\n");
    for (split, seed) in jobs {
        let (src, dst) = match split {
            Some(s) => (io::split_dir(&a.input, s), io::split_dir(out, s)),
            None => (a.input.clone(), out.to_path_buf()),
        };
        let records = io::read_dataset(&src).with_context(|| format!("reading dataset {}", src.display()))?;
        let transformed = transform_dataset(&records, &dist, a.augment, seed)?;
        io::write_dataset(&dst, &transformed)?;
        let _ = writeln!(summary, "{}\t{}", split.unwrap_or("-"), transformed.len());
    }
    stdout.write_all(summary.as_bytes())?;
    Ok(())
}

fn ead_table(cli: &Cli, a: &EadTableArgs, stdout: &mut dyn Write) -> Result<()> {
    let base = data::generate(ShapeSpec::new(data::ShapeKind::RandomUniform, a.points, cli.seed))?;
    let reference = if a.prealign {
        pca::prealign(&base)?
    } else {
        base.clone()
    };
    let dist = distribution(a.dist, a.candidates);
    let mut values = Vec::with_capacity(a.transforms);
    let mut rows = String::from("index\tead\tstderr\n");
    for i in 0..a.transforms {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cli.seed, &[1, i as u64]));
        let moved = dist.sample(&base, &mut rng)?.transform.apply(&base)?;
        let moved = if a.prealign { pca::prealign(&moved)? } else { moved };
        let e: EadEstimate = ead_mc(&reference, &moved, a.samples, derive_seed(cli.seed, &[2, i as u64]))?;
        let _ = writeln!(rows, "{i}\t{:.6e}\t{:.6e}", e.value, e.stderr);
        values.push(e.value);
    }
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let _ = writeln!(rows, "# mean\t{mean:.6e}\t{:.6e}", sd / n.sqrt());
    emit_text(cli, &rows, stdout)
}
