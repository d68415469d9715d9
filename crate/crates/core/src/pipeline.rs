//! Configuration and the end-to-end run: data, embedding, kernel, eigenbasis,
//! norm table, selection and the files written for each run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{ComplexSeries, PowerSpectrum, covariance_basis, covariance_rkhs_norms, harmonic_average};
use crate::dynamics::{FlowSpec, ObservationMap, StateVector, Tolerance, TrajectoryConfig, generate_trajectory};
use crate::eigensolve::{EigenOptions, SpectralBasis, load_basis, save_basis, top_eigenpairs};
use crate::embedding::delay_embed;
use crate::error::{Error, Result};
use crate::io::{CsvOut, fmt_f64, ingest_csv, write_columns_csv, write_series_csv, write_weights_csv};
use crate::kernel::{DEFAULT_DENSE_LIMIT, GramOperator, KernelSpec, kernel_fingerprint, tune_bandwidth};
use crate::points::PointSet;
use crate::rkhs::{FrequencyGrid, NormTable, norm_table};
use crate::selection::{CandidateEigenpair, SelectionConfig, algorithm_e};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Benchmark {
    Torus,
    Lorenz63,
    Product,
}

impl Benchmark {
    pub fn flow(&self) -> FlowSpec {
        match self {
            Benchmark::Torus => FlowSpec::torus(),
            Benchmark::Lorenz63 => FlowSpec::lorenz63(),
            Benchmark::Product => FlowSpec::product(),
        }
    }

    fn of_flow(flow: &FlowSpec) -> Self {
        match flow {
            FlowSpec::TorusRotation { .. } => Benchmark::Torus,
            FlowSpec::Lorenz63 { .. } => Benchmark::Lorenz63,
            FlowSpec::ProductL63Rotation { .. } => Benchmark::Product,
        }
    }

    /// Trajectory length used with this system in the reference experiments.
    pub fn default_samples(&self) -> usize {
        match self {
            Benchmark::Torus => 40_000,
            Benchmark::Lorenz63 => 60_000,
            Benchmark::Product => 70_000,
        }
    }

    pub fn default_delays(&self) -> usize {
        match self {
            Benchmark::Torus => 5,
            Benchmark::Lorenz63 => 2,
            Benchmark::Product => 10,
        }
    }

    pub fn default_selection(&self) -> SelectionConfig {
        let (l0, l1, delta0, delta1) = match self {
            Benchmark::Torus => (100, 1000, 0.1, 1.0),
            Benchmark::Lorenz63 => (100, 1000, 1.0, 1.0),
            Benchmark::Product => (1240, 1500, 1.0, 1.0),
        };
        SelectionConfig {
            l0,
            l1,
            delta0,
            delta1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Gaussian,
    Covariance,
    MarkovGaussian,
}

/// Gaussian bandwidth: tuned from the data or given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Auto,
    Fixed(f64),
}

impl FromStr for Epsilon {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Epsilon::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Epsilon::Fixed(v)),
            _ => Err(format!("expected `auto` or a positive number, got `{s}`")),
        }
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::Auto => f.write_str("auto"),
            Epsilon::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for Epsilon {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Epsilon::Auto => s.serialize_str("auto"),
            Epsilon::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Epsilon::from_str(&v.to_string()),
            Raw::Text(s) => Epsilon::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub benchmark: Option<Benchmark>,
    /// Flow parameters overriding the benchmark defaults.
    pub flow: Option<FlowSpec>,
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    pub samples: Option<usize>,
    pub dt: Option<f64>,
    pub spinup: Option<f64>,
    pub x0: Option<Vec<f64>>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    pub delays: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub family: Option<KernelFamily>,
    pub epsilon: Option<Epsilon>,
    pub dense_limit: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigensolveSection {
    pub count: Option<usize>,
    pub tol: Option<f64>,
    pub max_restarts: Option<usize>,
    pub block: Option<usize>,
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    pub l0: Option<usize>,
    pub l1: Option<usize>,
    pub delta0: Option<f64>,
    pub delta1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub surface_points: Option<usize>,
    pub eigenfunctions: Option<bool>,
}

/// A run configuration as read from TOML; unset fields take the defaults of
/// the chosen benchmark.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub source: SourceSection,
    #[serde(default)]
    pub trajectory: TrajectorySection,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub eigensolve: EigensolveSection,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl PipelineConfig {
    pub fn benchmark(b: Benchmark) -> Self {
        let mut c = Self::default();
        c.source.benchmark = Some(b);
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The configuration recorded in a run manifest.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        Ok(read_manifest(path)?.config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Fills every unset field with its default.
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let s = self.settings()?;
        Ok(s.to_config())
    }

    pub fn settings(&self) -> Result<RunSettings> {
        let src = &self.source;
        let source = match (&src.csv, src.benchmark, src.flow) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                return Err(Error::Config(
                    "`source.csv` cannot be combined with a benchmark or flow".into(),
                ));
            }
            (Some(p), None, None) => Source::Csv(p.clone()),
            (None, b, Some(flow)) => {
                if let Some(b) = b
                    && Benchmark::of_flow(&flow) != b
                {
                    return Err(Error::Config(format!(
                        "flow kind does not match benchmark `{}`",
                        serde_json::to_string(&b).unwrap_or_default()
                    )));
                }
                Source::Flow(flow)
            }
            (None, Some(b), None) => Source::Flow(b.flow()),
            (None, None, None) => {
                return Err(Error::Config(
                    "set either `source.benchmark` or `source.csv`".into(),
                ));
            }
        };
        let bench = match &source {
            Source::Flow(f) => Some(Benchmark::of_flow(f)),
            Source::Csv(_) => None,
        };
        let need = |what: &str| Error::Config(format!("`{what}` is required for CSV input"));
        let t = &self.trajectory;
        let dt = t.dt.unwrap_or(0.01);
        let samples = match (t.samples, bench) {
            (Some(n), _) => Some(n),
            (None, Some(b)) => Some(b.default_samples()),
            (None, None) => None,
        };
        let spinup = match (&source, t.spinup) {
            (Source::Flow(f), s) => s.unwrap_or(f.default_spinup()),
            (Source::Csv(_), _) => 0.0,
        };
        let x0 = match (&source, &t.x0) {
            (Source::Flow(f), x) => Some(x.clone().unwrap_or_else(|| f.default_x0().0)),
            (Source::Csv(_), _) => None,
        };
        let defaults = Tolerance::default();
        let tolerance = Tolerance {
            rtol: t.rtol.unwrap_or(defaults.rtol),
            atol: t.atol.unwrap_or(defaults.atol),
        };
        let delays = self
            .embedding
            .delays
            .or(bench.map(|b| b.default_delays()))
            .ok_or_else(|| need("embedding.delays"))?;
        let sel_default = bench.map(|b| b.default_selection());
        let sel = &self.selection;
        let pick = |v: Option<usize>, d: Option<usize>, name: &str| v.or(d).ok_or_else(|| need(name));
        let selection = SelectionConfig {
            l0: pick(sel.l0, sel_default.map(|s| s.l0), "selection.l0")?,
            l1: pick(sel.l1, sel_default.map(|s| s.l1), "selection.l1")?,
            delta0: sel
                .delta0
                .or(sel_default.map(|s| s.delta0))
                .ok_or_else(|| need("selection.delta0"))?,
            delta1: sel
                .delta1
                .or(sel_default.map(|s| s.delta1))
                .ok_or_else(|| need("selection.delta1"))?,
        };
        let e = &self.eigensolve;
        let eig_defaults = EigenOptions::default();
        let settings = RunSettings {
            source,
            samples,
            dt,
            spinup,
            x0,
            tolerance,
            delays,
            family: self.kernel.family.unwrap_or(KernelFamily::MarkovGaussian),
            epsilon: self.kernel.epsilon.unwrap_or(Epsilon::Auto),
            dense_limit: self.kernel.dense_limit.unwrap_or(DEFAULT_DENSE_LIMIT),
            count: e.count.unwrap_or(selection.l1),
            eigen: EigenOptions {
                seed: self.seed.unwrap_or(0),
                tol: e.tol.unwrap_or(eig_defaults.tol),
                max_restarts: e.max_restarts.unwrap_or(eig_defaults.max_restarts),
                block: e.block.unwrap_or(eig_defaults.block),
            },
            cache: e.cache.clone(),
            selection,
            out_dir: self.output.dir.clone().unwrap_or_else(|| PathBuf::from("run")),
            surface_points: self.output.surface_points.unwrap_or(20),
            eigenfunctions: self.output.eigenfunctions.unwrap_or(true),
        };
        settings.validate()?;
        Ok(settings)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Flow(FlowSpec),
    Csv(PathBuf),
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub source: Source,
    /// Raw sample count; for CSV input, `None` uses every row.
    pub samples: Option<usize>,
    pub dt: f64,
    pub spinup: f64,
    pub x0: Option<Vec<f64>>,
    pub tolerance: Tolerance,
    pub delays: usize,
    pub family: KernelFamily,
    pub epsilon: Epsilon,
    pub dense_limit: usize,
    /// Number of eigenpairs computed.
    pub count: usize,
    pub eigen: EigenOptions,
    pub cache: Option<PathBuf>,
    pub selection: SelectionConfig,
    pub out_dir: PathBuf,
    pub surface_points: usize,
    pub eigenfunctions: bool,
}

impl RunSettings {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.dt > 0.0) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.samples.is_some_and(|n| n < 2) {
            return bad("at least 2 samples are required".into());
        }
        if self.delays == 0 {
            return bad("embedding.delays must be at least 1".into());
        }
        if self.count == 0 {
            return bad("eigensolve.count must be positive".into());
        }
        if self.selection.l0 > self.selection.l1 {
            return bad(format!(
                "selection.l0 ({}) exceeds selection.l1 ({})",
                self.selection.l0, self.selection.l1
            ));
        }
        if !(self.selection.delta0 > 0.0 && self.selection.delta1 > 0.0) {
            return bad("selection thresholds must be positive".into());
        }
        if let (Source::Flow(f), Some(x0)) = (&self.source, &self.x0)
            && x0.len() != f.state_dim()
        {
            return bad(format!(
                "x0 has {} components but the flow state has {}",
                x0.len(),
                f.state_dim()
            ));
        }
        Ok(())
    }

    pub fn kernel_spec(&self, epsilon: Option<f64>) -> KernelSpec {
        match (self.family, epsilon) {
            (KernelFamily::Covariance, _) => KernelSpec::Covariance,
            (KernelFamily::Gaussian, Some(epsilon)) => KernelSpec::Gaussian { epsilon },
            (KernelFamily::MarkovGaussian, Some(epsilon)) => KernelSpec::MarkovGaussian { epsilon },
            (_, None) => unreachable!("Gaussian kernels are built after the bandwidth is known"),
        }
    }

    pub fn to_config(&self) -> PipelineConfig {
        let (benchmark, flow, csv) = match &self.source {
            Source::Flow(f) => (Some(Benchmark::of_flow(f)), Some(*f), None),
            Source::Csv(p) => (None, None, Some(p.clone())),
        };
        let is_flow = matches!(self.source, Source::Flow(_));
        PipelineConfig {
            seed: Some(self.eigen.seed),
            source: SourceSection {
                benchmark,
                flow,
                csv,
            },
            trajectory: TrajectorySection {
                samples: self.samples,
                dt: Some(self.dt),
                spinup: is_flow.then_some(self.spinup),
                x0: self.x0.clone(),
                rtol: is_flow.then_some(self.tolerance.rtol),
                atol: is_flow.then_some(self.tolerance.atol),
            },
            embedding: EmbeddingSection {
                delays: Some(self.delays),
            },
            kernel: KernelSection {
                family: Some(self.family),
                epsilon: (self.family != KernelFamily::Covariance).then_some(self.epsilon),
                dense_limit: Some(self.dense_limit),
            },
            eigensolve: EigensolveSection {
                count: Some(self.count),
                tol: Some(self.eigen.tol),
                max_restarts: Some(self.eigen.max_restarts),
                block: Some(self.eigen.block),
                cache: self.cache.clone(),
            },
            selection: SelectionSection {
                l0: Some(self.selection.l0),
                l1: Some(self.selection.l1),
                delta0: Some(self.selection.delta0),
                delta1: Some(self.selection.delta1),
            },
            output: OutputSection {
                dir: Some(self.out_dir.clone()),
                surface_points: Some(self.surface_points),
                eigenfunctions: Some(self.eigenfunctions),
            },
        }
    }
}

/// Observation series with its sampling interval.
#[derive(Debug, Clone)]
pub struct Observations {
    pub series: PointSet,
    pub dt: f64,
}

/// Generates the benchmark trajectory or reads the CSV named by the settings.
pub fn load_observations(s: &RunSettings) -> Result<Observations> {
    match &s.source {
        Source::Flow(flow) => {
            let cfg = TrajectoryConfig {
                n: s.samples.expect("benchmarks always resolve a sample count"),
                dt: s.dt,
                x0: s.x0.clone().map(StateVector),
                spinup: s.spinup,
            };
            let tr = generate_trajectory(flow, &cfg, ObservationMap::Benchmark, s.tolerance)?;
            Ok(Observations {
                series: tr.series,
                dt: s.dt,
            })
        }
        Source::Csv(path) => {
            let data = ingest_csv(path, Some(s.dt))?;
            let mut series = data.series;
            if let Some(n) = s.samples {
                if n > series.len() {
                    return Err(Error::InvalidArgument(format!(
                        "{} has {} rows, fewer than the {n} requested",
                        path.display(),
                        series.len()
                    )));
                }
                series = PointSet::from_flat(series.dim(), series.as_flat()[..n * series.dim()].to_vec())?;
            }
            Ok(Observations { series, dt: s.dt })
        }
    }
}

/// The kernel eigenbasis and what it was computed from.
pub struct KernelStage {
    pub epsilon: Option<f64>,
    pub spec: KernelSpec,
    pub gram: Option<GramOperator>,
    pub fingerprint: String,
    pub storage: &'static str,
}

/// Builds the kernel on the embedded points (tuning the bandwidth when asked).
pub fn build_kernel(s: &RunSettings, points: &PointSet) -> Result<KernelStage> {
    let epsilon = match (s.family, s.epsilon) {
        (KernelFamily::Covariance, _) => None,
        (_, Epsilon::Fixed(e)) => Some(e),
        (_, Epsilon::Auto) => Some(tune_bandwidth(points)?),
    };
    let spec = s.kernel_spec(epsilon);
    if spec == KernelSpec::Covariance {
        return Ok(KernelStage {
            epsilon,
            spec,
            gram: None,
            fingerprint: kernel_fingerprint(&spec, points),
            storage: "svd",
        });
    }
    let gram = GramOperator::new(points.clone(), spec, s.dense_limit)?;
    let storage = match gram.storage() {
        crate::kernel::Storage::Dense => "dense",
        crate::kernel::Storage::MatrixFree => "matrix-free",
    };
    Ok(KernelStage {
        epsilon,
        spec,
        fingerprint: gram.fingerprint(),
        gram: Some(gram),
        storage,
    })
}

fn cache_key(kernel_fp: &str, count: usize, opts: &EigenOptions) -> String {
    let mut h = Sha256::new();
    h.update(kernel_fp.as_bytes());
    h.update((count as u64).to_le_bytes());
    h.update(opts.seed.to_le_bytes());
    h.update(opts.tol.to_le_bytes());
    h.update((opts.max_restarts as u64).to_le_bytes());
    h.update((opts.block as u64).to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Eigenbasis of the kernel, read from or written to the configured cache.
pub fn compute_basis(s: &RunSettings, k: &KernelStage, points: &PointSet) -> Result<SpectralBasis> {
    let key = cache_key(&k.fingerprint, s.count, &s.eigen);
    if let Some(path) = &s.cache
        && path.exists()
    {
        match load_basis(path, &key) {
            Ok(b) => {
                info!("reusing eigenbasis from {}", path.display());
                return Ok(b);
            }
            Err(e) => info!("not reusing {}: {e}", path.display()),
        }
    }
    let basis = match &k.gram {
        Some(g) => top_eigenpairs(g, s.count.min(g.len()), &s.eigen)?,
        None => covariance_basis(points)?,
    };
    if let Some(path) = &s.cache {
        save_basis(path, &basis, &key)?;
    }
    Ok(basis)
}

/// Everything a run computes, kept in memory for callers that want more than the files.
pub struct RunOutcome {
    pub settings: RunSettings,
    pub observations: Observations,
    pub epsilon: Option<f64>,
    pub basis: SpectralBasis,
    pub table: NormTable,
    pub candidates: Vec<CandidateEigenpair>,
    pub spectrum: PowerSpectrum,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub config: PipelineConfig,
    pub epsilon: Option<f64>,
    pub raw_samples: usize,
    pub embedded_samples: usize,
    pub observation_dim: usize,
    pub embedding_dim: usize,
    pub data_sha256: String,
    pub kernel_fingerprint: String,
    pub storage: String,
    pub eigenpairs: usize,
    pub eigenvalues: Vec<f64>,
    pub residuals: Vec<f64>,
    pub max_relative_residual: f64,
    pub boundary_degenerate: bool,
    pub selection: SelectionConfig,
    pub candidates: usize,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CandidateRecord {
    omega: f64,
    w_l0: f64,
    w_l1: f64,
    ratio: Option<f64>,
    rkhs_norm_sq: f64,
    weights: Option<String>,
}

struct Timer {
    stages: Vec<(String, f64)>,
}

impl Timer {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        let secs = t.elapsed().as_secs_f64();
        info!("{stage}: {secs:.2} s");
        self.stages.push((stage.to_string(), secs));
        Ok(out)
    }
}

fn data_sha256(points: &PointSet) -> String {
    let mut h = Sha256::new();
    for v in points.as_flat() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Truncation levels sampled for the surface file.
pub fn surface_levels(l0: usize, l1: usize, points: usize) -> Vec<usize> {
    if points <= 1 || l0 == l1 {
        return vec![l1];
    }
    let mut v: Vec<usize> = (0..points)
        .map(|k| l0 + ((l1 - l0) as f64 * k as f64 / (points - 1) as f64).round() as usize)
        .collect();
    v.dedup();
    v
}

/// Runs every stage and writes the run directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome> {
    let settings = cfg.settings()?;
    let mut timer = Timer { stages: Vec::new() };
    let obs = timer.run("ingest", || load_observations(&settings))?;
    let embedded = timer.run("embed", || delay_embed(&obs.series, settings.delays))?;
    let points = &embedded.vectors;
    settings
        .selection
        .validate(points.len())
        .map_err(|e| e.in_stage("configure"))?;
    let kernel = timer.run("kernel", || build_kernel(&settings, points))?;
    let basis = timer.run("eigensolve", || compute_basis(&settings, &kernel, points))?;
    let grid = FrequencyGrid::new(points.len(), obs.dt)?;
    let sel = settings.selection;
    let table = timer.run("norms", || norm_table(&basis, &grid, &[sel.l0, sel.l1]))?;
    let candidates = timer.run("select", || algorithm_e(&table, &sel, &basis))?;
    let spectrum = timer.run("baseline", || {
        let raw_grid = FrequencyGrid::new(obs.series.len(), obs.dt)?;
        harmonic_average(&ComplexSeries::from(&obs.series), &raw_grid)
    })?;
    let covariance = if settings.family == KernelFamily::Covariance {
        Some(timer.run("covariance", || {
            covariance_rkhs_norms(&ComplexSeries::from(points), &grid)
        })?)
    } else {
        None
    };

    let lambda0 = basis.lambdas.first().copied().unwrap_or(1.0);
    let mut manifest = Manifest {
        package: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: settings.to_config(),
        epsilon: kernel.epsilon,
        raw_samples: obs.series.len(),
        embedded_samples: points.len(),
        observation_dim: obs.series.dim(),
        embedding_dim: points.dim(),
        data_sha256: data_sha256(&obs.series),
        kernel_fingerprint: kernel.fingerprint.clone(),
        storage: kernel.storage.to_string(),
        eigenpairs: basis.l(),
        eigenvalues: basis.lambdas.clone(),
        residuals: basis.residuals.clone(),
        max_relative_residual: basis.residuals.iter().fold(0.0, |a: f64, &r| a.max(r / lambda0)),
        boundary_degenerate: basis.boundary_degenerate,
        selection: sel,
        candidates: candidates.len(),
        files: Vec::new(),
    };

    let export_start = Instant::now();
    let files = export(&settings, &obs, &table, &candidates, &spectrum, covariance.as_ref(), &mut manifest)
        .map_err(|e| e.in_stage("export"))?;
    timer.stages.push(("export".into(), export_start.elapsed().as_secs_f64()));
    manifest.files = files;
    write_json(&settings.out_dir.join("manifest.json"), &manifest)?;
    let timings: serde_json::Map<String, serde_json::Value> = timer
        .stages
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::json!(v)))
        .collect();
    write_json(&settings.out_dir.join("timings.json"), &timings)?;

    Ok(RunOutcome {
        settings,
        observations: obs,
        epsilon: kernel.epsilon,
        basis,
        table,
        candidates,
        spectrum,
        manifest,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn export(
    s: &RunSettings,
    obs: &Observations,
    table: &NormTable,
    candidates: &[CandidateEigenpair],
    spectrum: &PowerSpectrum,
    covariance: Option<&crate::baseline::CovarianceNorms>,
    manifest: &mut Manifest,
) -> Result<Vec<String>> {
    let dir = &s.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec!["manifest.json".to_string(), "config.toml".to_string()];
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, manifest.config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;

    let sel = s.selection;
    let omegas = table.grid.omegas();
    let w0 = table.w_for(sel.l0);
    let w1 = table.w_for(sel.l1);
    let ratios: Vec<f64> = w0.iter().zip(&w1).map(|(a, b)| crate::selection::ratio(*a, *b)).collect();

    let mut add = |name: &str| -> PathBuf {
        files.push(name.to_string());
        dir.join(name)
    };
    write_columns_csv(&add("norms.csv"), &["omega", "w_l0", "w_l1", "ratio"], &[&omegas, &w0, &w1, &ratios])?;
    write_series_csv(&add("fig_a_timeseries.csv"), obs.dt, &obs.series)?;
    write_columns_csv(&add("fig_b_w_l0.csv"), &["omega", "w_l0"], &[&omegas, &w0])?;
    write_columns_csv(&add("fig_c_ratio.csv"), &["omega", "ratio"], &[&omegas, &ratios])?;

    let surface_path = add("fig_d_surface.csv");
    let mut surface = CsvOut::create(&surface_path, &["omega", "l", "w"])?;
    let levels = surface_levels(sel.l0, sel.l1, s.surface_points);
    for c in candidates {
        for &l in &levels {
            surface.line([
                fmt_f64(c.candidate.omega),
                l.to_string(),
                fmt_f64(table.w_at(c.candidate.row, l)),
            ])?;
        }
    }
    surface.finish()?;

    let raw_omegas = spectrum.grid.omegas();
    write_columns_csv(&add("power_spectrum.csv"), &["omega", "power"], &[&raw_omegas, &spectrum.power])?;
    if let Some(cov) = covariance {
        write_columns_csv(
            &add("covariance_comparison.csv"),
            &["omega", "w_rkhs", "power"],
            &[&omegas, &cov.w, &cov.power],
        )?;
    }

    let mut records = Vec::with_capacity(candidates.len());
    if s.eigenfunctions && !candidates.is_empty() {
        let ef = dir.join("eigenfunctions");
        std::fs::create_dir_all(&ef).map_err(|e| Error::io(&ef, e))?;
    }
    for (k, c) in candidates.iter().enumerate() {
        let weights = if s.eigenfunctions {
            let name = format!("eigenfunctions/candidate_{k:03}.csv");
            write_weights_csv(&add(&name), &c.eigenfunction.weights)?;
            Some(name)
        } else {
            None
        };
        records.push(CandidateRecord {
            omega: c.candidate.omega,
            w_l0: c.candidate.w_l0,
            w_l1: c.candidate.w_l1,
            ratio: c.candidate.ratio.is_finite().then_some(c.candidate.ratio),
            rkhs_norm_sq: c.eigenfunction.rkhs_norm_sq,
            weights,
        });
    }
    write_json(&add("candidates.json"), &records)?;
    files.push("timings.json".into());
    Ok(files)
}

/// Rebuilds the kernel of a finished run from its manifest, for evaluating
/// stored eigenfunctions at new points.
pub fn rebuild_kernel(manifest: &Manifest) -> Result<GramOperator> {
    let mut cfg = manifest.config.clone();
    if let Some(e) = manifest.epsilon {
        cfg.kernel.epsilon = Some(Epsilon::Fixed(e));
    }
    let s = cfg.settings()?;
    let obs = load_observations(&s)?;
    let points = delay_embed(&obs.series, s.delays)?.vectors;
    let gram = GramOperator::new(points, s.kernel_spec(manifest.epsilon), s.dense_limit)?;
    if gram.fingerprint() != manifest.kernel_fingerprint {
        return Err(Error::Cache(
            "the regenerated data do not match the run's kernel fingerprint".into(),
        ));
    }
    Ok(gram)
}

/// Weights file of candidate `index` as recorded in `candidates.json`.
pub fn candidate_weights_path(run_dir: &Path, index: usize) -> Result<PathBuf> {
    let path = run_dir.join("candidates.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records: Vec<CandidateRecord> =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let rec = records.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!("run has {} candidates, no index {index}", records.len()))
    })?;
    let name = rec.weights.as_ref().ok_or_else(|| {
        Error::InvalidArgument("the run was made without eigenfunction output".into())
    })?;
    Ok(run_dir.join(name))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
