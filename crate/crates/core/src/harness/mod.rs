//! Experiment orchestration behind the command-line front end.
//!
//! A run is described by an [`ExperimentSpec`], resolved from an optional
//! TOML file overlaid with command-line overrides. Every run writes the
//! resolved spec to `run_config.toml` in its output directory.

pub mod io;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackMode, AttackResult, SigmaGradient};
use crate::data::{Dataset, DatasetKind, DatasetSpec, LabeledSample};
use crate::error::{Error, Result};
use crate::grid;
use crate::manifold;
use crate::network::{self, evaluate, Network};
use crate::tensor::{PaddingMode, Tensor};
use crate::train::{self, TrainConfig, TrainReport};

use io::{AttackRecord, AttackSummary, ManifoldRow, SweepRow, SweepStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Train,
    Attack,
    Sweep,
    Manifold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "kernel-scale")]
    KernelScale,
    #[serde(rename = "sigma-init")]
    SigmaInit,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::KernelScale => "kernel-scale",
            SweepAxis::SigmaInit => "sigma-init",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernel-scale" => Ok(SweepAxis::KernelScale),
            "sigma-init" => Ok(SweepAxis::SigmaInit),
            other => Err(Error::Config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// Fully resolved description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub command: Command,
    pub model: PathBuf,
    pub out: PathBuf,
    pub workers: usize,
    /// Attack or trace at most this many evaluation samples.
    pub max_samples: Option<usize>,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub sweep: Option<SweepSpec>,
    pub manifold_grid: Vec<f64>,
}

/// Partial spec as read from a config file or collected from flags; every
/// field is optional and later layers win.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecOverrides {
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub max_samples: Option<usize>,
    pub dataset: Option<DatasetKind>,
    pub data_seed: Option<u64>,
    pub mode: Option<AttackMode>,
    pub kernel_scale: Option<usize>,
    pub sigma_init: Option<f64>,
    pub padding: Option<PaddingMode>,
    pub max_iters: Option<usize>,
    pub step: Option<f64>,
    pub sigma_gradient: Option<SigmaGradient>,
    pub target: Option<usize>,
    pub sweep_axis: Option<SweepAxis>,
    pub sweep_values: Option<Vec<f64>>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub target_accuracy: Option<f64>,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
}

impl SpecOverrides {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Fields set in `top` replace those in `self`.
    pub fn overlay(self, top: SpecOverrides) -> SpecOverrides {
        macro_rules! pick {
            ($($f:ident),*) => {
                SpecOverrides { $($f: top.$f.or(self.$f)),* }
            };
        }
        pick!(
            model, out, workers, max_samples, dataset, data_seed, mode, kernel_scale, sigma_init, padding,
            max_iters, step, sigma_gradient, target, sweep_axis, sweep_values, learning_rate, epochs,
            batch_size, target_accuracy, train_per_class, test_per_class
        )
    }
}

impl ExperimentSpec {
    /// Fills every unset field with its default. Spirals default to the
    /// 1-D three-tap blur with circular padding, images to the 9×9 kernel
    /// with reflect padding.
    pub fn resolve(command: Command, o: SpecOverrides) -> Result<Self> {
        let kind = o.dataset.unwrap_or(DatasetKind::Images);
        let seed = o.data_seed.unwrap_or(0);
        let mut dataset = DatasetSpec::default_for(kind, seed);
        if let Some(n) = o.train_per_class {
            dataset.train_per_class = n;
        }
        if let Some(n) = o.test_per_class {
            dataset.test_per_class = n;
        }
        let mut train = match kind {
            DatasetKind::Spirals => TrainConfig::spirals(seed),
            DatasetKind::Images => TrainConfig::images(seed),
        };
        if let Some(v) = o.learning_rate {
            train.learning_rate = v;
        }
        if let Some(v) = o.epochs {
            train.max_epochs = v;
        }
        if let Some(v) = o.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = o.target_accuracy {
            train.target_accuracy = Some(v);
        }
        let (default_scale, default_padding) = match kind {
            DatasetKind::Spirals => (3, PaddingMode::Circular),
            DatasetKind::Images => (9, PaddingMode::Reflect),
        };
        let defaults = AttackConfig::default();
        let attack = AttackConfig {
            mode: o.mode.unwrap_or(AttackMode::PeakSuppression),
            max_iterations: o.max_iters.unwrap_or(defaults.max_iterations),
            step_length: o.step.unwrap_or(defaults.step_length),
            kernel_scale: o.kernel_scale.unwrap_or(default_scale),
            sigma_init: o.sigma_init.unwrap_or(defaults.sigma_init),
            padding: o.padding.unwrap_or(default_padding),
            feature_layer: None,
            sigma_gradient: o.sigma_gradient.unwrap_or_default(),
            target: o.target,
        };
        let sweep = match (o.sweep_axis, o.sweep_values) {
            (Some(axis), Some(values)) => Some(SweepSpec { axis, values }),
            (None, None) => None,
            (Some(axis), None) => Some(SweepSpec {
                axis,
                values: match axis {
                    SweepAxis::KernelScale => vec![3.0, 5.0, 7.0, 9.0],
                    SweepAxis::SigmaInit => vec![0.1, 0.5, 0.75, 1.0, 5.0, 10.0],
                },
            }),
            (None, Some(_)) => return Err(Error::Config("sweep values given without an axis".into())),
        };
        let spec = ExperimentSpec {
            command,
            model: o.model.unwrap_or_else(|| PathBuf::from("model.bin")),
            out: o.out.unwrap_or_else(|| PathBuf::from("out")),
            workers: o.workers.unwrap_or(1),
            max_samples: o.max_samples,
            dataset,
            train,
            attack,
            sweep,
            manifold_grid: manifold::default_sigma_grid(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        self.attack.validate()?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep list is empty".into()));
            }
            if s.values.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("sweep list must be sorted ascending".into()));
            }
            if s.axis == SweepAxis::KernelScale
                && s.values.iter().any(|v| v.fract() != 0.0 || *v < 1.0 || (*v as usize) % 2 == 0)
            {
                return Err(Error::Config("kernel scales must be odd positive integers".into()));
            }
            if s.axis == SweepAxis::SigmaInit && s.values.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Config("initial σ values must be positive".into()));
            }
        }
        if self.command == Command::Sweep && self.sweep.is_none() {
            return Err(Error::Config("sweep needs an axis".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    fn prepare_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        io::write_text(&self.out.join("run_config.toml"), &self.to_toml()?)
    }

    fn model_id(&self) -> String {
        self.model
            .file_stem()
            .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))
    }
}

pub fn build_model(kind: DatasetKind, seed: u64) -> Result<Network> {
    match kind {
        DatasetKind::Spirals => network::build_spirals_mlp(seed),
        DatasetKind::Images => network::build_default_cnn(seed),
    }
}

pub fn run_train(spec: &ExperimentSpec) -> Result<TrainReport> {
    let train_set = spec.dataset.train_set()?;
    let test_set = spec.dataset.test_set()?;
    let mut net = build_model(spec.dataset.kind, spec.dataset.seed)?;
    let report = train::train(&mut net, &train_set, Some(&test_set), &spec.train)?;
    if let Some(dir) = spec.model.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    net.save(&spec.model)?;
    spec.prepare_out()?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    io::write_text(&spec.out.join("train_report.json"), &(json + "\n"))?;
    Ok(report)
}

fn load_checked(spec: &ExperimentSpec) -> Result<(Network, Dataset)> {
    let net = Network::load(&spec.model)?;
    let data = spec.dataset.test_set()?;
    if net.input_shape() != spec.dataset.input_shape().as_slice() {
        return Err(Error::Config(format!(
            "model expects input {:?} but the dataset produces {:?}",
            net.input_shape(),
            spec.dataset.input_shape()
        )));
    }
    Ok((net, data))
}

/// Indices of evaluation samples the model classifies correctly, capped at
/// `max_samples`.
pub fn correctly_classified(net: &Network, data: &Dataset, max_samples: Option<usize>) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, s) in data.samples.iter().enumerate() {
        if max_samples.is_some_and(|m| out.len() >= m) {
            break;
        }
        if evaluate(net, &s.input)?.0 == s.label {
            out.push(i);
        }
    }
    Ok(out)
}

/// Runs `cfg` on each listed sample on a pool of `workers` threads; results
/// come back in sample order.
pub fn attack_samples(
    net: &Network,
    data: &Dataset,
    indices: &[usize],
    cfg: &AttackConfig,
    workers: usize,
) -> Result<Vec<AttackResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        indices
            .par_iter()
            .map(|&i| {
                let s = &data.samples[i];
                attack::run_attack(net, &s.input, s.label, cfg)
            })
            .collect()
    })
}

/// Aggregate rates over attacked samples. `None` when nothing was attacked.
pub fn aggregate(results: &[AttackResult]) -> Option<SweepStats> {
    if results.is_empty() {
        return None;
    }
    let n = results.len() as f64;
    Some(SweepStats {
        error_rate: results.iter().filter(|r| r.success).count() as f64 / n,
        single_step_rate: results.iter().filter(|r| r.single_step_flip).count() as f64 / n,
        mean_iters: results.iter().map(|r| r.iterations_used as f64).sum::<f64>() / n,
        n: results.len(),
    })
}

fn feature_block(net: &Network, x: &Tensor) -> Result<Tensor> {
    Ok(net.run(x)?.1)
}

fn write_heatmap(dir: &Path, stem: &str, features: &Tensor) -> Result<()> {
    io::write_text(&dir.join(format!("{stem}.txt")), &grid::to_text(features))?;
    if let [c, h, w] = *features.shape() {
        let mut plane = vec![0.0; h * w];
        for ch in 0..c {
            for (p, v) in plane.iter_mut().zip(features.channel(ch)) {
                *p += v / c as f64;
            }
        }
        let hi = plane.iter().cloned().fold(0.0, f64::max);
        io::write_text(&dir.join(format!("{stem}.pgm")), &grid::to_pgm(&plane, h, w, 0.0, hi))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRun {
    pub records: Vec<AttackRecord>,
    pub summary: AttackSummary,
}

pub fn run_attack(spec: &ExperimentSpec) -> Result<AttackRun> {
    let (net, data) = load_checked(spec)?;
    spec.prepare_out()?;
    let indices = correctly_classified(&net, &data, spec.max_samples)?;
    if indices.is_empty() {
        eprintln!("warning: no correctly classified samples to attack");
    }
    let results = attack_samples(&net, &data, &indices, &spec.attack, spec.workers)?;

    let traces = spec.out.join("traces");
    let heatmaps = spec.out.join("heatmaps");
    let finals = spec.out.join("final");
    for d in [&traces, &heatmaps, &finals] {
        fs::create_dir_all(d)?;
    }
    let mut records = Vec::with_capacity(results.len());
    for (&i, r) in indices.iter().zip(&results) {
        let s: &LabeledSample = &data.samples[i];
        io::write_text(
            &traces.join(format!("sample_{i:04}.csv")),
            &io::attack_trace_to_csv(&r.confidence_trace, &r.peak_trace),
        )?;
        write_heatmap(&heatmaps, &format!("sample_{i:04}_before"), &feature_block(&net, &s.input)?)?;
        write_heatmap(&heatmaps, &format!("sample_{i:04}_after"), &feature_block(&net, &r.final_input)?)?;
        io::write_text(&finals.join(format!("sample_{i:04}.txt")), &grid::to_text(&r.final_input))?;
        records.push(AttackRecord {
            sample: i,
            label: s.label,
            success: r.success,
            iterations_used: r.iterations_used,
            adversarial_label: r.adversarial_label,
            adversarial_confidence: r.adversarial_confidence,
            single_step_flip: r.single_step_flip,
            initial_peak: r.peak_trace[0],
            final_peak: *r.peak_trace.last().expect("nonempty trace"),
            final_sigmas: r.final_sigmas.clone(),
        });
    }
    io::write_text(&spec.out.join("results.jsonl"), &io::results_to_jsonl(&records)?)?;

    let stats = aggregate(&results);
    let successes = results.iter().filter(|r| r.success).count();
    let low = results.iter().filter(|r| r.success && r.adversarial_confidence < 0.1).count();
    let summary = AttackSummary {
        model: spec.model_id(),
        mode: spec.attack.mode.as_str().to_string(),
        evaluated: data.len(),
        attacked: results.len(),
        successes,
        error_rate: stats.map_or(0.0, |s| s.error_rate),
        single_step_rate: stats.map_or(0.0, |s| s.single_step_rate),
        mean_iters: stats.map_or(0.0, |s| s.mean_iters),
        low_confidence_fraction: if successes == 0 { 0.0 } else { low as f64 / successes as f64 },
        denominator: io::DENOMINATOR_NOTE.to_string(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    io::write_text(&spec.out.join("summary.json"), &(json + "\n"))?;
    Ok(AttackRun { records, summary })
}

/// Sweep rows in axis order. Failed sub-runs are kept as marked rows; the
/// caller decides the exit status from [`sweep_failed`].
pub fn run_sweep(spec: &ExperimentSpec) -> Result<Vec<SweepRow>> {
    let sweep = spec
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs an axis".into()))?;
    let (net, data) = load_checked(spec)?;
    spec.prepare_out()?;
    let indices = correctly_classified(&net, &data, spec.max_samples)?;
    let mut rows = Vec::with_capacity(sweep.values.len());
    for &value in &sweep.values {
        let mut cfg = spec.attack.clone();
        match sweep.axis {
            SweepAxis::KernelScale => cfg.kernel_scale = value as usize,
            SweepAxis::SigmaInit => cfg.sigma_init = value,
        }
        let stats = match attack_samples(&net, &data, &indices, &cfg, spec.workers) {
            Ok(results) => aggregate(&results),
            Err(e) => {
                eprintln!("sweep {}={value} failed: {e}", sweep.axis.as_str());
                None
            }
        };
        rows.push(SweepRow {
            model: spec.model_id(),
            axis: sweep.axis.as_str().to_string(),
            value,
            stats,
        });
    }
    io::write_text(&spec.out.join("sweep.csv"), &io::sweep_to_csv(&rows))?;
    Ok(rows)
}

pub fn sweep_failed(rows: &[SweepRow]) -> bool {
    rows.iter().any(|r| r.stats.is_none())
}

/// Per-sample manifold artifacts: trace, crossings, σ₀ bracket and, for
/// 1-D inputs, the chord deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldStudy {
    pub row: ManifoldRow,
    pub trace: manifold::ManifoldTrace,
    pub crossings: manifold::CrossingReport,
    pub sigma0: manifold::Sigma0Bracket,
}

/// Oracle for the dataset: nearest arm for spirals, the generator's class
/// for images (blur never changes the pattern identity it was drawn from).
pub fn study_sample(
    net: &Network,
    spec: &DatasetSpec,
    index: usize,
    sample: &LabeledSample,
    grid: &[f64],
    n: usize,
    padding: PaddingMode,
) -> Result<ManifoldStudy> {
    let trace = manifold::trace_blur_manifold(&sample.input, net, grid, n, padding)?;
    let crossings = manifold::find_crossings(&trace);
    let geometry = spec.spiral_geometry;
    let generator_class = sample.oracle_label;
    let spiral_oracle = move |x: &Tensor| geometry.oracle(x);
    let image_oracle = move |_: &Tensor| generator_class;
    let oracle: &dyn Fn(&Tensor) -> usize = match spec.kind {
        DatasetKind::Spirals => &spiral_oracle,
        DatasetKind::Images => &image_oracle,
    };
    let sigma0 = manifold::estimate_sigma0(sample, Some(oracle), grid, n, padding)?;
    let line_deviation = if sample.input.rank() == 1 {
        Some(manifold::line_segment_check_1d(&sample.input, grid, n, padding)?)
    } else {
        None
    };
    let row = ManifoldRow {
        sample: index,
        label: sample.label,
        origin_class: crossings.origin_class,
        crossings: crossings.crossings.len(),
        attains_other_class: crossings.attains_other_class,
        sigma0_low: sigma0.lower,
        sigma0_high: sigma0.upper,
        plane_pass: manifold::plane_pass_count(&trace, 1e-9),
        points: trace.points.len(),
        line_deviation,
    };
    Ok(ManifoldStudy {
        row,
        trace,
        crossings,
        sigma0,
    })
}

pub fn run_manifold(spec: &ExperimentSpec) -> Result<Vec<ManifoldStudy>> {
    let (net, data) = load_checked(spec)?;
    spec.prepare_out()?;
    let count = spec.max_samples.unwrap_or(data.len()).min(data.len());
    let pool = spec.pool()?;
    let studies: Vec<ManifoldStudy> = pool.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| {
                study_sample(
                    &net,
                    &spec.dataset,
                    i,
                    &data.samples[i],
                    &spec.manifold_grid,
                    spec.attack.kernel_scale,
                    spec.attack.padding,
                )
            })
            .collect::<Result<_>>()
    })?;
    let traces = spec.out.join("traces");
    fs::create_dir_all(&traces)?;
    for s in &studies {
        io::write_text(
            &traces.join(format!("sample_{:04}.csv", s.row.sample)),
            &manifold::trace_to_csv(&s.trace),
        )?;
    }
    let rows: Vec<ManifoldRow> = studies.iter().map(|s| s.row.clone()).collect();
    io::write_text(&spec.out.join("manifold_summary.csv"), &io::manifold_summary_to_csv(&rows))?;
    Ok(studies)
}
