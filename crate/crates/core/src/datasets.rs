//! Synthetic trajectory generators, deterministic splits and on-disk storage.
//!
//! A saved dataset is a directory holding `manifest.json` and `data.csv`.
//! The data file has one row per time step with columns
//! `traj, step, <state columns>, <condition columns>`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constraints::battery::{BatteryPack, KELVIN};
use crate::constraints::{DomainPack, OscillatorPack};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::Normalizer;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OscillatorSpec {
    pub n_trajectories: usize,
    pub t_len: usize,
    pub dt: f64,
    pub mass: f64,
    pub stiffness: f64,
    pub gamma_range: [f64; 2],
    pub amplitude_range: [f64; 2],
    pub seed: u64,
}

impl Default for OscillatorSpec {
    fn default() -> Self {
        Self {
            n_trajectories: 2000,
            t_len: 100,
            dt: 0.1,
            mass: 1.0,
            stiffness: 1.0,
            gamma_range: [0.0, 0.5],
            amplitude_range: [0.5, 1.5],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatterySpec {
    pub n_cells: usize,
    pub cycles: usize,
    /// Ambient temperature range, degrees Celsius.
    pub temp_range_c: [f64; 2],
    /// Arrhenius prefactor range, Ah per cycle.
    pub prefactor_range: [f64; 2],
    pub initial_soh_range: [f64; 2],
    /// Amplitude and period (cycles) of the per-cycle thermal ripple.
    pub ripple_c: f64,
    pub ripple_period: f64,
    pub pack: BatteryPack,
    pub seed: u64,
}

impl Default for BatterySpec {
    fn default() -> Self {
        Self {
            n_cells: 200,
            cycles: 100,
            temp_range_c: [15.0, 40.0],
            prefactor_range: [0.1, 0.3],
            initial_soh_range: [0.95, 1.0],
            ripple_c: 2.0,
            ripple_period: 25.0,
            pack: BatteryPack::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Oscillator(OscillatorSpec),
    Battery(BatterySpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::Oscillator(OscillatorSpec::default())
    }
}

/// Trajectories `[T, D]` in physical units with one condition row each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub columns: Vec<String>,
    pub cond_names: Vec<String>,
    pub trajectories: Vec<Tensor<f64>>,
    pub conditions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: DatasetSpec,
    n_trajectories: usize,
    t_len: usize,
    columns: Vec<String>,
    cond_names: Vec<String>,
    normalization: Option<Normalizer>,
}

const FORMAT_VERSION: u32 = 1;

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn t_len(&self) -> usize {
        self.trajectories.first().map(|t| t.shape()[0]).unwrap_or(match &self.spec {
            DatasetSpec::Oscillator(s) => s.t_len,
            DatasetSpec::Battery(s) => s.cycles,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.columns.len()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_names.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            spec: self.spec.clone(),
            columns: self.columns.clone(),
            cond_names: self.cond_names.clone(),
            trajectories: idx.iter().map(|&i| self.trajectories[i].clone()).collect(),
            conditions: idx.iter().map(|&i| self.conditions[i].clone()).collect(),
        }
    }

    /// Constraint pack matching the generator, with the oscillator amplitude
    /// box set to 1.5 times the largest initial amplitude present.
    pub fn default_pack(&self) -> DomainPack {
        match &self.spec {
            DatasetSpec::Oscillator(s) => {
                let amp = self
                    .conditions
                    .iter()
                    .map(|c| (c[1] * c[1] + s.mass / s.stiffness * c[2] * c[2]).sqrt())
                    .fold(0.0, f64::max);
                let x_bound = if amp > 0.0 { 1.5 * amp } else { 1.5 * s.amplitude_range[1] };
                DomainPack::Oscillator(OscillatorPack {
                    mass: s.mass,
                    stiffness: s.stiffness,
                    dt: s.dt,
                    x_bound,
                })
            }
            DatasetSpec::Battery(s) => DomainPack::Battery(s.pack),
        }
    }

    fn data_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["traj".to_string(), "step".to_string()];
        header.extend(self.columns.iter().cloned());
        header.extend(self.cond_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        let d = self.state_dim();
        for (k, (tr, c)) in self.trajectories.iter().zip(&self.conditions).enumerate() {
            for (i, row) in tr.data().chunks(d).enumerate() {
                let mut rec = vec![k.to_string(), i.to_string()];
                rec.extend(row.iter().map(|v| format!("{v:?}")));
                rec.extend(c.iter().map(|v| format!("{v:?}")));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// SHA-256 of the serialized data file and spec, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.spec).map_err(|e| Error::Data(e.to_string()))?);
        h.update(self.data_csv()?);
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let normalization = if self.is_empty() {
            None
        } else {
            Some(Normalizer::fit(&self.trajectories, &self.conditions)?)
        };
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            n_trajectories: self.len(),
            t_len: self.t_len(),
            columns: self.columns.clone(),
            cond_names: self.cond_names.clone(),
            normalization,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        fs::write(dir.join(DATA_FILE), self.data_csv()?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: dir.join(MANIFEST_FILE).display().to_string(),
                msg: e.to_string(),
            })?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "dataset format version {} is not supported (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        let (d, dc) = (m.columns.len(), m.cond_names.len());
        let width = 2 + d + dc;
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(dir.join(DATA_FILE))
            .map_err(csv_err)?;
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.len() != width {
            return Err(Error::Data(format!("header has {} columns, manifest declares {width}", header.len())));
        }
        let mut states: Vec<Vec<f64>> = Vec::new();
        let mut conds: Vec<Vec<f64>> = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let row = r + 1;
            let rec = rec.map_err(|e| Error::Data(format!("row {row}: {e}")))?;
            if rec.len() != width {
                return Err(Error::Data(format!("row {row}: expected {width} columns, found {}", rec.len())));
            }
            let num = |j: usize| -> Result<f64> {
                rec[j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("row {row}: column {j} is not a number: {:?}", &rec[j])))
            };
            let traj: usize = rec[0].trim().parse().map_err(|_| Error::Data(format!("row {row}: bad trajectory index")))?;
            let step: usize = rec[1].trim().parse().map_err(|_| Error::Data(format!("row {row}: bad step index")))?;
            if traj == states.len() && step == 0 {
                states.push(Vec::with_capacity(m.t_len * d));
                conds.push((0..dc).map(|j| num(2 + d + j)).collect::<Result<_>>()?);
            } else if traj + 1 != states.len() || step != states[traj].len() / d.max(1) {
                return Err(Error::Data(format!("row {row}: out-of-order record (traj {traj}, step {step})")));
            }
            for j in 0..d {
                states[traj].push(num(2 + j)?);
            }
        }
        if states.len() != m.n_trajectories {
            return Err(Error::Data(format!(
                "manifest declares {} trajectories, data holds {}",
                m.n_trajectories,
                states.len()
            )));
        }
        let trajectories = states
            .into_iter()
            .enumerate()
            .map(|(k, s)| {
                if s.len() != m.t_len * d {
                    return Err(Error::Data(format!("trajectory {k} has {} steps, expected {}", s.len() / d.max(1), m.t_len)));
                }
                Tensor::from_f64(&[m.t_len, d], &s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: m.spec,
            columns: m.columns,
            cond_names: m.cond_names,
            trajectories,
            conditions: conds,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] { rng.random_range(r[0]..r[1]) } else { r[0] }
}

pub fn gen_oscillator(spec: &OscillatorSpec) -> Result<Dataset> {
    let pack = OscillatorPack {
        mass: spec.mass,
        stiffness: spec.stiffness,
        dt: spec.dt,
        x_bound: 1.0,
    };
    pack.validate()?;
    let crit = 2.0 * (spec.mass * spec.stiffness).sqrt();
    let [g_lo, g_hi] = spec.gamma_range;
    if !(0.0 <= g_lo && g_lo <= g_hi && g_hi < crit) {
        return Err(Error::Config(format!(
            "gamma range {:?} must lie in [0, {crit}) for an underdamped oscillator",
            spec.gamma_range
        )));
    }
    if !(spec.amplitude_range[0] >= 0.0 && spec.amplitude_range[0] <= spec.amplitude_range[1]) || spec.t_len < 2 {
        return Err(Error::Config(format!("invalid oscillator spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let omega = (spec.stiffness / spec.mass).sqrt();
    let mut trajectories = Vec::with_capacity(spec.n_trajectories);
    let mut conditions = Vec::with_capacity(spec.n_trajectories);
    for _ in 0..spec.n_trajectories {
        let gamma = uniform(&mut rng, spec.gamma_range);
        let amp = uniform(&mut rng, spec.amplitude_range);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (x0, v0) = (amp * phase.cos(), -amp * omega * phase.sin());
        trajectories.push(pack.solve(gamma, x0, v0, spec.t_len)?);
        conditions.push(vec![gamma, x0, v0]);
    }
    Ok(Dataset {
        spec: DatasetSpec::Oscillator(spec.clone()),
        columns: vec!["x".into(), "v".into()],
        cond_names: vec!["gamma".into(), "x0".into(), "v0".into()],
        trajectories,
        conditions,
    })
}

/// One cell: capacity follows the forward-difference Arrhenius law
/// `C(n+1) = C(n) - A exp(-Ea / (R T(n)))` under a rippled temperature.
pub fn battery_cell(spec: &BatterySpec, t_ambient_k: f64, prefactor: f64, soh0: f64) -> Result<Tensor<f64>> {
    let p = &spec.pack;
    let mut cap = soh0 * p.c_nominal;
    let mut rows = Vec::with_capacity(4 * spec.cycles);
    for n in 0..spec.cycles {
        let tk = t_ambient_k + spec.ripple_c * (std::f64::consts::TAU * n as f64 / spec.ripple_period).sin();
        let soh = cap / p.c_nominal;
        if soh < 0.0 {
            return Err(Error::Config(format!(
                "cell with T = {t_ambient_k} K and A = {prefactor} reaches negative SOH at cycle {n}"
            )));
        }
        rows.extend([p.normalize_temp(tk), cap / p.c_nominal, soh.clamp(0.0, 1.0), n as f64]);
        cap -= p.fade_rate(prefactor, tk)?;
    }
    Tensor::from_f64(&[spec.cycles, 4], &rows)
}

pub fn gen_battery(spec: &BatterySpec) -> Result<Dataset> {
    spec.pack.validate()?;
    let ok = spec.cycles >= 2
        && spec.ripple_period > 0.0
        && spec.ripple_c >= 0.0
        && spec.prefactor_range[0] >= 0.0
        && spec.temp_range_c[0] <= spec.temp_range_c[1]
        && spec.prefactor_range[0] <= spec.prefactor_range[1]
        && (0.0..=1.0).contains(&spec.initial_soh_range[0])
        && (0.0..=1.0).contains(&spec.initial_soh_range[1]);
    if !ok {
        return Err(Error::Config(format!("invalid battery spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trajectories = Vec::with_capacity(spec.n_cells);
    let mut conditions = Vec::with_capacity(spec.n_cells);
    for _ in 0..spec.n_cells {
        let t_amb = uniform(&mut rng, spec.temp_range_c) + KELVIN;
        let a = uniform(&mut rng, spec.prefactor_range);
        let soh0 = uniform(&mut rng, spec.initial_soh_range);
        trajectories.push(battery_cell(spec, t_amb, a, soh0)?);
        conditions.push(vec![t_amb, a]);
    }
    Ok(Dataset {
        spec: DatasetSpec::Battery(spec.clone()),
        columns: vec!["temp_norm".into(), "capacity_norm".into(), "soh".into(), "cycle".into()],
        cond_names: vec!["t_ambient_k".into(), "prefactor".into()],
        trajectories,
        conditions,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    /// Shuffled 80/20 partition.
    #[default]
    Random,
    /// Train on `cond[column] <= train_max`, test on `cond[column] >= test_min`.
    /// Trajectories between the two thresholds belong to neither side.
    Extrapolate { column: usize, train_max: f64, test_min: f64 },
}

impl SplitMode {
    pub fn gamma_extrapolation() -> Self {
        Self::Extrapolate {
            column: 0,
            train_max: 0.3,
            test_min: 0.4,
        }
    }
}

pub fn split(ds: &Dataset, mode: SplitMode, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    match mode {
        SplitMode::Random => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let n_train = (0.8 * ds.len() as f64).round() as usize;
            let (tr, te) = idx.split_at(n_train);
            Ok((ds.subset(tr), ds.subset(te)))
        }
        SplitMode::Extrapolate {
            column,
            train_max,
            test_min,
        } => {
            if column >= ds.cond_dim() || !(train_max < test_min) {
                return Err(Error::Config(format!("invalid extrapolation split {mode:?}")));
            }
            let tr: Vec<usize> = (0..ds.len()).filter(|&i| ds.conditions[i][column] <= train_max).collect();
            let te: Vec<usize> = (0..ds.len()).filter(|&i| ds.conditions[i][column] >= test_min).collect();
            if te.is_empty() {
                return Err(Error::Data(format!(
                    "no trajectories with {} >= {test_min} for the extrapolation test set",
                    ds.cond_names[column]
                )));
            }
            if tr.is_empty() {
                return Err(Error::Data(format!("no trajectories with {} <= {train_max} for training", ds.cond_names[column])));
            }
            Ok((ds.subset(&tr), ds.subset(&te)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_osc(n: usize) -> OscillatorSpec {
        OscillatorSpec {
            n_trajectories: n,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn undamped_cosine_case() {
        let pack = OscillatorPack::default();
        let tr = pack.solve(0.0, 1.0, 0.0, 100).unwrap();
        for i in 0..100 {
            let t = i as f64 * 0.1;
            assert!((tr.at(&[i, 0]) - t.cos()).abs() < 1e-12);
            assert!((pack.energy(tr.at(&[i, 0]), tr.at(&[i, 1])) - 0.5).abs() < 1e-12);
        }
    }

    /// Fixed-step RK4 on `x'' = -(k x + g v) / m`, substepped well below `dt`.
    fn rk4(gamma: f64, x0: f64, v0: f64, dt: f64, n: usize) -> Vec<[f64; 2]> {
        let f = |s: [f64; 2]| [s[1], -s[0] - gamma * s[1]];
        let sub = 50;
        let h = dt / sub as f64;
        let mut s = [x0, v0];
        let mut out = vec![s];
        for _ in 1..n {
            for _ in 0..sub {
                let k1 = f(s);
                let k2 = f([s[0] + h / 2.0 * k1[0], s[1] + h / 2.0 * k1[1]]);
                let k3 = f([s[0] + h / 2.0 * k2[0], s[1] + h / 2.0 * k2[1]]);
                let k4 = f([s[0] + h * k3[0], s[1] + h * k3[1]]);
                for j in 0..2 {
                    s[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
                }
            }
            out.push(s);
        }
        out
    }

    #[test]
    fn closed_form_agrees_with_numeric_integration() {
        let pack = OscillatorPack::default();
        let tr = pack.solve(0.5, 0.7, -0.9, 100).unwrap();
        let num = rk4(0.5, 0.7, -0.9, 0.1, 100);
        let mut prev = f64::INFINITY;
        for (i, s) in num.iter().enumerate() {
            assert!((tr.at(&[i, 0]) - s[0]).abs() < 1e-6);
            assert!((tr.at(&[i, 1]) - s[1]).abs() < 1e-6);
            let e = pack.energy(tr.at(&[i, 0]), tr.at(&[i, 1]));
            assert!(e < prev);
            prev = e;
        }
    }

    #[test]
    fn generator_shapes_and_self_consistency() {
        let ds = gen_oscillator(&small_osc(20)).unwrap();
        assert_eq!(ds.len(), 20);
        assert!(ds.trajectories.iter().all(|t| t.shape() == [100, 2]));
        let DomainPack::Oscillator(pack) = ds.default_pack() else { panic!() };
        for (tr, c) in ds.trajectories.iter().zip(&ds.conditions) {
            assert!((0.0..=0.5).contains(&c[0]));
            let r = pack.eom_residual(tr, c[0]).unwrap();
            assert!(r.iter().all(|v| v.abs() < 1e-3));
            assert!(pack.violations(tr, c[0]).unwrap().total < 0.01);
        }
        let flat = gen_oscillator(&OscillatorSpec {
            gamma_range: [0.0, 0.0],
            ..small_osc(5)
        })
        .unwrap();
        for tr in &flat.trajectories {
            assert!(pack.energy_balance_error(tr, 0.0).unwrap() < 1e-6);
        }
        assert_eq!(gen_oscillator(&small_osc(4)).unwrap(), gen_oscillator(&small_osc(4)).unwrap());
        let over = OscillatorSpec {
            gamma_range: [0.0, 2.5],
            ..small_osc(3)
        };
        assert!(gen_oscillator(&over).is_err());
    }

    #[test]
    fn battery_generator_properties() {
        let spec = BatterySpec {
            n_cells: 30,
            ..Default::default()
        };
        let ds = gen_battery(&spec).unwrap();
        let DomainPack::Battery(pack) = ds.default_pack() else { panic!() };
        for (tr, c) in ds.trajectories.iter().zip(&ds.conditions) {
            let soh: Vec<f64> = (0..spec.cycles).map(|i| tr.at(&[i, 2])).collect();
            assert!(soh.windows(2).all(|w| w[1] <= w[0]));
            assert!(soh.iter().all(|s| (0.0..=1.0).contains(s)));
            let r = pack.violations(tr, c[1]).unwrap();
            assert!(r.phi[1] < 1e-3);
            assert_eq!(r.phi[2], 0.0);
        }
        let still = battery_cell(&spec, 300.0, 0.0, 0.9).unwrap();
        assert!((0..spec.cycles).all(|i| still.at(&[i, 2]) == 0.9));
        let flat = BatterySpec { ripple_c: 0.0, ..spec.clone() };
        let cool = battery_cell(&flat, 298.0, 0.2, 1.0).unwrap();
        let hot = battery_cell(&flat, 313.0, 0.2, 1.0).unwrap();
        for i in 1..spec.cycles {
            assert!(1.0 - hot.at(&[i, 1]) > 1.0 - cool.at(&[i, 1]));
        }
        assert!(battery_cell(&spec, 300.0, 50.0, 1.0).is_err());
    }

    #[test]
    fn random_split_sizes() {
        let ds = gen_oscillator(&small_osc(680)).unwrap();
        let (tr, te) = split(&ds, SplitMode::Random, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (544, 136));
        let (tr2, te2) = split(&ds, SplitMode::Random, 1).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        let mut all: Vec<f64> = tr.conditions.iter().chain(&te.conditions).map(|c| c[1]).collect();
        let mut orig: Vec<f64> = ds.conditions.iter().map(|c| c[1]).collect();
        all.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(all, orig);
    }

    #[test]
    fn extrapolation_split_respects_bands() {
        let ds = gen_oscillator(&small_osc(200)).unwrap();
        let (tr, te) = split(&ds, SplitMode::gamma_extrapolation(), 0).unwrap();
        assert!(tr.conditions.iter().all(|c| c[0] <= 0.3));
        assert!(te.conditions.iter().all(|c| c[0] >= 0.4));
        let low = gen_oscillator(&OscillatorSpec {
            gamma_range: [0.0, 0.2],
            ..small_osc(50)
        })
        .unwrap();
        assert!(split(&low, SplitMode::gamma_extrapolation(), 0).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_oscillator(&small_osc(7)).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.trajectories.iter().zip(&ds.trajectories) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.fingerprint().unwrap(), ds.fingerprint().unwrap());

        let empty = ds.subset(&[]);
        let d2 = tempfile::tempdir().unwrap();
        empty.save(d2.path()).unwrap();
        let text = fs::read_to_string(d2.path().join(DATA_FILE)).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(Dataset::load(d2.path()).unwrap().is_empty());
    }

    #[test]
    fn wrong_column_count_reports_row_one() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_oscillator(&small_osc(2)).unwrap();
        ds.save(dir.path()).unwrap();
        let path = dir.path().join(DATA_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1].push_str(",9.0");
        fs::write(&path, lines.join("\n")).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("row 1"), "{err}");
    }
}
