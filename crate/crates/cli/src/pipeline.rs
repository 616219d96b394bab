//! Subcommand implementations. Each stage reads only files written by an
//! earlier stage and writes its artifacts plus the resolved config into its
//! own directory under the output root.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fnoflow::checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint};
use fnoflow::constraints::DomainPack;
use fnoflow::datasets::{gen_battery, gen_oscillator, split, Dataset, DatasetSpec};
use fnoflow::discovery::{compute_residuals, discover, DiscoveryReport, FeatureLayout, Provenance};
use fnoflow::metrics::{evaluate, EvalReport};
use fnoflow::sampler::{initial_noise, sample_from, verify_bound, BoundCertificate};
use fnoflow::trainer::{derived_rng, trace_csv, TraceRow, Trainer};
use fnoflow::{Error, Result, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Precision, RunConfig, RESOLVED_FILE};

pub const PACK_FILE: &str = "pack.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

const STREAM_VERIFY: u64 = 30;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn stage_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(RESOLVED_FILE), cfg.to_toml()?)?;
    Ok(dir)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join(fnoflow::datasets::MANIFEST_FILE).exists() {
        return Err(Error::Data(format!("no dataset at {} (run gen-data first)", dir.display())));
    }
    Dataset::load(dir)
}

fn require_checkpoint(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("checkpoint {} does not exist (run train first)", path.display())))
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Generates the configured dataset into the data directory.
pub fn gen_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match &cfg.dataset {
        DatasetSpec::Oscillator(s) => gen_oscillator(s)?,
        DatasetSpec::Battery(s) => gen_battery(s)?,
    };
    let dir = cfg.data_dir();
    ds.save(&dir)?;
    fs::write(dir.join(RESOLVED_FILE), cfg.to_toml()?)?;
    Ok(ds)
}

/// Train and test partitions of the stored dataset under the run seed.
pub fn load_split(cfg: &RunConfig) -> Result<(Dataset, Dataset, DomainPack)> {
    let ds = load_dataset(&cfg.data_dir())?;
    let pack = ds.default_pack();
    let (train, test) = split(&ds, cfg.split, cfg.seed)?;
    Ok((train, test, pack))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    pub checkpoint: PathBuf,
}

fn train_as<S: Scalar>(cfg: &RunConfig, resume: bool, mut log: impl FnMut(&TraceRow)) -> Result<TrainOutcome> {
    let (train, _, pack) = load_split(cfg)?;
    let dir = stage_dir(cfg, "train")?;
    let ckpt = cfg.checkpoint_path();
    let mut tr = if resume && ckpt.exists() {
        let tr = load_checkpoint::<S>(&ckpt)?;
        if tr.dataset_hash != train.fingerprint()? {
            return Err(Error::Data("checkpoint was trained on a different dataset".into()));
        }
        let mut want = cfg.train_config();
        want.epochs = tr.cfg.epochs;
        if tr.cfg != want {
            return Err(Error::Config("checkpoint training config differs from the resolved config".into()));
        }
        let mut tr = tr;
        tr.cfg.epochs = cfg.train.epochs;
        tr
    } else {
        Trainer::<S>::new(&train, pack, cfg.train_config())?
    };
    let mut timing = String::from("epoch,wall_secs\n");
    for r in &tr.trace {
        timing.push_str(&format!("{},{:?}\n", r.epoch, r.wall_secs));
    }
    while tr.epoch < tr.cfg.epochs {
        let row = tr.run_epoch(&train)?;
        log(&row);
        timing.push_str(&format!("{},{:?}\n", row.epoch, row.wall_secs));
        save_checkpoint(&tr, &ckpt)?;
    }
    if !ckpt.exists() {
        save_checkpoint(&tr, &ckpt)?;
    }
    fs::write(dir.join("trace.csv"), trace_csv(&tr.trace, false))?;
    fs::write(dir.join("timing.csv"), timing)?;
    Ok(TrainOutcome {
        trace: tr.trace,
        checkpoint: ckpt,
    })
}

/// Trains on the train split, checkpointing after every epoch. With
/// `resume`, an existing checkpoint is continued up to the configured epochs.
pub fn train(cfg: &RunConfig, resume: bool, log: impl FnMut(&TraceRow)) -> Result<TrainOutcome> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, resume, log),
        Precision::F64 => train_as::<f64>(cfg, resume, log),
    }
}

/// Matched generated and reference sets as written by `sample`.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub generated: Dataset,
    pub reference: Dataset,
    pub pack: DomainPack,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.generated.save(&dir.join("generated"))?;
        self.reference.save(&dir.join("reference"))?;
        write_json(&dir.join(PACK_FILE), &self.pack)?;
        write_json(&dir.join(PROVENANCE_FILE), &self.provenance)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let gen_dir = dir.join("generated");
        if !gen_dir.exists() {
            return Err(Error::Data(format!("no samples at {} (run sample first)", dir.display())));
        }
        let s = Self {
            generated: Dataset::load(&gen_dir)?,
            reference: Dataset::load(&dir.join("reference"))?,
            pack: read_json(&dir.join(PACK_FILE))?,
            provenance: read_json(&dir.join(PROVENANCE_FILE))?,
        };
        if s.generated.len() != s.reference.len() || s.generated.conditions != s.reference.conditions {
            return Err(Error::Data("generated and reference sets are not matched".into()));
        }
        Ok(s)
    }
}

fn sample_as<S: Scalar>(cfg: &RunConfig) -> Result<SampleSet> {
    let ckpt = cfg.checkpoint_path();
    require_checkpoint(&ckpt)?;
    let tr = load_checkpoint::<S>(&ckpt)?;
    let (_, test, _) = load_split(cfg)?;
    let n = if cfg.sample.n == 0 { test.len() } else { cfg.sample.n.min(test.len()) };
    let reference = test.subset(&(0..n).collect::<Vec<_>>());
    let model = &tr.model;
    let icfg = cfg.integrator();
    let chunks: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(cfg.sample.batch_size).map(|c| c.to_vec()).collect();
    let run_chunk = |bi: usize, idx: &[usize]| -> Result<Vec<Tensor<f64>>> {
        let crefs: Vec<&[f64]> = idx.iter().map(|&i| reference.conditions[i].as_slice()).collect();
        let c = model.norm.encode_conds::<S>(&crefs)?;
        let x0 = initial_noise::<S>(&[idx.len(), model.state_dim(), model.t_len], cfg.seed, bi as u64);
        let x = sample_from(model, &x0, &c, &cfg.guidance, &icfg)?;
        model.norm.decode_states(&x)
    };
    let workers = cfg.workers.max(1).min(chunks.len().max(1));
    let mut results: Vec<Option<Result<Vec<Tensor<f64>>>>> = (0..chunks.len()).map(|_| None).collect();
    if workers <= 1 {
        for (bi, idx) in chunks.iter().enumerate() {
            results[bi] = Some(run_chunk(bi, idx));
        }
    } else {
        // Batches are independent and each draws its own noise stream, so
        // the output does not depend on the worker count.
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    let run_chunk = &run_chunk;
                    s.spawn(move || {
                        (w..chunks.len())
                            .step_by(workers)
                            .map(|bi| (bi, run_chunk(bi, &chunks[bi])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (bi, r) in h.join().expect("sampling worker panicked") {
                    results[bi] = Some(r);
                }
            }
        });
    }
    let mut trajectories = Vec::with_capacity(n);
    for r in results {
        trajectories.extend(r.expect("every batch ran")?);
    }
    let generated = Dataset {
        trajectories,
        ..reference.clone()
    };
    let provenance = Provenance {
        dataset_hash: reference.fingerprint()?,
        model_hash: file_hash(&ckpt)?,
    };
    Ok(SampleSet {
        generated,
        reference,
        pack: tr.pack,
        provenance,
    })
}

/// Samples one trajectory per test condition and writes both sets.
pub fn sample(cfg: &RunConfig) -> Result<SampleSet> {
    let ckpt = cfg.checkpoint_path();
    require_checkpoint(&ckpt)?;
    let set = match checkpoint_dtype(&ckpt)?.as_str() {
        "f32" => sample_as::<f32>(cfg)?,
        _ => sample_as::<f64>(cfg)?,
    };
    let dir = stage_dir(cfg, "samples")?;
    let out = cfg.samples_dir();
    set.save(&out)?;
    if out != dir {
        fs::write(out.join(RESOLVED_FILE), cfg.to_toml()?)?;
    }
    Ok(set)
}

/// Scores the sample directory; timing goes to a separate file so the
/// report itself is reproducible.
pub fn evaluate_samples(cfg: &RunConfig) -> Result<EvalReport> {
    let set = SampleSet::load(&cfg.samples_dir())?;
    let start = Instant::now();
    let report = evaluate(
        &set.generated.trajectories,
        &set.reference.trajectories,
        &set.reference.conditions,
        &set.pack,
        &cfg.eval_options(),
        None,
    )?;
    let secs = start.elapsed().as_secs_f64();
    let dir = stage_dir(cfg, "eval")?;
    write_json(&dir.join("report.json"), &report)?;
    let header = EvalReport::CSV_HEADER.rsplit_once(',').map_or(EvalReport::CSV_HEADER, |(h, _)| h);
    let row = report.csv_row();
    let row = row.rsplit_once(',').map_or(row.as_str(), |(r, _)| r);
    fs::write(dir.join("summary.csv"), format!("{header}\n{row}\n"))?;
    write_json(&dir.join("timing.json"), &serde_json::json!({ "runtime_secs": secs }))?;
    Ok(report)
}

fn verify_as<S: Scalar>(cfg: &RunConfig) -> Result<BoundCertificate> {
    let ckpt = cfg.checkpoint_path();
    let tr = load_checkpoint::<S>(&ckpt)?;
    let DomainPack::Oscillator(pack) = tr.pack else {
        return Err(Error::Config("verify-bounds needs an analytic oracle and supports the oscillator only".into()));
    };
    let (_, test, _) = load_split(cfg)?;
    let n = cfg.verify.starts;
    let idx: Vec<usize> = (0..n).map(|i| i % test.len()).collect();
    let model = &tr.model;
    let conds: Vec<&[f64]> = idx.iter().map(|&i| test.conditions[i].as_slice()).collect();
    let c = model.norm.encode_conds::<S>(&conds)?;
    let oracle_trajs = conds
        .iter()
        .map(|k| pack.solve(k[0], k[1], k[2], model.t_len))
        .collect::<Result<Vec<_>>>()?;
    let oracle = model.norm.encode_states::<S>(&oracle_trajs.iter().collect::<Vec<_>>())?;
    let shape = [n, model.state_dim(), model.t_len];
    let x0 = initial_noise::<S>(&shape, cfg.seed, 1 << 32);
    let offset = initial_noise::<S>(&shape, cfg.seed, (1 << 32) + 1);
    let delta = S::lit(cfg.verify.start_offset);
    let y0 = x0.zip_map(&offset, "start offset", |a, b| a + delta * b)?;
    let probe_x0 = initial_noise::<S>(&shape, cfg.seed, (1 << 32) + 2);
    let mut rng = derived_rng(cfg.seed, STREAM_VERIFY, 0);
    verify_bound(
        model,
        &cfg.guidance,
        &oracle,
        &c,
        &x0,
        &y0,
        &probe_x0,
        cfg.verify.lipschitz_probes,
        &cfg.integrator(),
        &mut rng,
    )
}

/// Writes the certificate, then fails with a verification error if the bound was violated.
pub fn verify_bounds(cfg: &RunConfig) -> Result<BoundCertificate> {
    let ckpt = cfg.checkpoint_path();
    require_checkpoint(&ckpt)?;
    let cert = match checkpoint_dtype(&ckpt)?.as_str() {
        "f32" => verify_as::<f32>(cfg)?,
        _ => verify_as::<f64>(cfg)?,
    };
    let dir = stage_dir(cfg, "verify")?;
    write_json(&dir.join("certificate.json"), &cert)?;
    if !cert.holds {
        return Err(Error::Verification(format!(
            "bound held for {} of {} starts",
            cert.starts_holding, cert.starts
        )));
    }
    Ok(cert)
}

/// Searches the residuals between reference and generated samples for candidate laws.
pub fn discover_laws(cfg: &RunConfig) -> Result<DiscoveryReport> {
    let set = SampleSet::load(&cfg.samples_dir())?;
    let n = match cfg.discovery.n_trajectories {
        0 => set.reference.len(),
        k => k.min(set.reference.len()),
    };
    let layout = match set.pack {
        DomainPack::Oscillator(p) => FeatureLayout::oscillator(p.dt),
        DomainPack::Battery(_) => FeatureLayout::battery(),
    };
    let rs = compute_residuals(
        &set.reference.trajectories[..n],
        &set.generated.trajectories[..n],
        &set.reference.conditions[..n],
        cfg.discovery.channel,
        &layout,
        cfg.seed,
    )?;
    let report = discover(&rs, &cfg.pattern_config(), &cfg.search_config(), set.provenance.clone())?;
    let dir = stage_dir(cfg, "discover")?;
    write_json(&dir.join("laws.json"), &report)?;
    Ok(report)
}
