use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use koopman_rkhs::baseline::{ComplexSeries, covariance_rkhs_norms, harmonic_average};
use koopman_rkhs::embedding::delay_embed;
use koopman_rkhs::io::{
    CsvOut, fmt_f64, ingest_csv, read_weights_csv, write_columns_csv, write_points_csv,
    write_series_csv,
};
use koopman_rkhs::pipeline::{
    Benchmark, Epsilon, KernelFamily, PipelineConfig, RunSettings, build_kernel,
    candidate_weights_path, compute_basis, load_observations, read_manifest, rebuild_kernel,
    run_pipeline,
};
use koopman_rkhs::eigensolve::SpectralBasis;
use koopman_rkhs::rkhs::{FrequencyGrid, NormTable, NystromFunction, norm_table};
use koopman_rkhs::selection::{algorithm_e, ratio};
use koopman_rkhs::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Koopman eigenfrequencies from RKHS norms of Fourier functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a benchmark system and write its observation series.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        /// Output CSV (`t,c0,...`).
        #[arg(long)]
        output: PathBuf,
    },
    /// Delay-embed the observation series.
    Embed {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Kernel eigenbasis and truncated RKHS norms on the frequency grid.
    Spectrum {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Select eigenfrequencies and print them.
    Select {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Harmonic-average power spectrum of the raw series.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a stored eigenfunction at points read from CSV.
    Extend {
        /// Directory of a finished run.
        #[arg(long)]
        run_dir: PathBuf,
        /// Candidate index in `candidates.json`.
        #[arg(long, default_value_t = 0)]
        candidate: usize,
        /// Points in delay coordinates, one per row.
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Full pipeline: data, kernel, eigenbasis, norms, selection, exports.
    Run {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Reuse the configuration recorded in a run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "input")]
    benchmark: Option<Benchmark>,
    /// Observation CSV instead of a benchmark.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    delays: Option<usize>,
    #[arg(long, value_enum)]
    kernel: Option<KernelFamily>,
    /// Gaussian bandwidth, or `auto`.
    #[arg(long)]
    epsilon: Option<Epsilon>,
    /// Number of eigenpairs.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    l0: Option<usize>,
    #[arg(long)]
    l1: Option<usize>,
    #[arg(long)]
    delta0: Option<f64>,
    #[arg(long)]
    delta1: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Eigenbasis cache file.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = match (&self.config, &self.manifest) {
            (Some(p), _) => PipelineConfig::load(p)?,
            (None, Some(p)) => PipelineConfig::from_manifest(p)?,
            (None, None) => PipelineConfig::default(),
        };
        if let Some(b) = self.benchmark {
            c.source.csv = None;
            if c.source.benchmark != Some(b) {
                c.source.flow = None;
                c.trajectory.x0 = None;
            }
            c.source.benchmark = Some(b);
        }
        if let Some(p) = &self.input {
            c.source = Default::default();
            c.source.csv = Some(p.clone());
        }
        set(&mut c.trajectory.samples, self.samples);
        set(&mut c.trajectory.dt, self.dt);
        set(&mut c.embedding.delays, self.delays);
        set(&mut c.kernel.family, self.kernel);
        set(&mut c.kernel.epsilon, self.epsilon);
        set(&mut c.eigensolve.count, self.count);
        set(&mut c.selection.l0, self.l0);
        set(&mut c.selection.l1, self.l1);
        set(&mut c.selection.delta0, self.delta0);
        set(&mut c.selection.delta1, self.delta1);
        set(&mut c.seed, self.seed);
        set(&mut c.eigensolve.cache, self.cache.clone());
        set(&mut c.output.dir, self.out.clone());
        Ok(c)
    }

    fn settings(&self) -> Result<RunSettings> {
        self.config()?.settings()
    }
}

fn set<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { run, output } => {
            let s = run.settings()?;
            let obs = load_observations(&s).map_err(|e| e.in_stage("ingest"))?;
            write_series_csv(&output, obs.dt, &obs.series)
        }
        Command::Embed { run, output } => {
            let s = run.settings()?;
            let obs = load_observations(&s).map_err(|e| e.in_stage("ingest"))?;
            let emb = delay_embed(&obs.series, s.delays).map_err(|e| e.in_stage("embed"))?;
            write_points_csv(&output, &emb.vectors)
        }
        Command::Spectrum { run } => {
            let s = run.settings()?;
            let (table, basis, epsilon) = spectrum(&s)?;
            create_dir(&s.out_dir)?;
            let js: Vec<f64> = (0..basis.l()).map(|j| j as f64).collect();
            write_columns_csv(
                &s.out_dir.join("eigenvalues.csv"),
                &["j", "lambda", "residual"],
                &[&js, &basis.lambdas, &basis.residuals],
            )?;
            let omegas = table.grid.omegas();
            let w0 = table.w_for(s.selection.l0);
            let w1 = table.w_for(s.selection.l1);
            let r: Vec<f64> = w0.iter().zip(&w1).map(|(a, b)| ratio(*a, *b)).collect();
            write_columns_csv(
                &s.out_dir.join("norms.csv"),
                &["omega", "w_l0", "w_l1", "ratio"],
                &[&omegas, &w0, &w1, &r],
            )?;
            if let Some(e) = epsilon {
                println!("epsilon {}", fmt_f64(e));
            }
            Ok(())
        }
        Command::Select { run } => {
            let s = run.settings()?;
            let (table, basis, _) = spectrum(&s)?;
            let cands = algorithm_e(&table, &s.selection, &basis).map_err(|e| e.in_stage("select"))?;
            println!("omega,w_l0,w_l1,ratio,rkhs_norm_sq");
            for c in &cands {
                let k = &c.candidate;
                println!(
                    "{},{},{},{},{}",
                    fmt_f64(k.omega),
                    fmt_f64(k.w_l0),
                    fmt_f64(k.w_l1),
                    fmt_f64(k.ratio),
                    fmt_f64(c.eigenfunction.rkhs_norm_sq)
                );
            }
            Ok(())
        }
        Command::Baseline { run } => {
            let s = run.settings()?;
            let obs = load_observations(&s).map_err(|e| e.in_stage("ingest"))?;
            create_dir(&s.out_dir)?;
            let grid = FrequencyGrid::new(obs.series.len(), obs.dt)?;
            let p = harmonic_average(&ComplexSeries::from(&obs.series), &grid)
                .map_err(|e| e.in_stage("baseline"))?;
            write_columns_csv(
                &s.out_dir.join("power_spectrum.csv"),
                &["omega", "power"],
                &[&grid.omegas(), &p.power],
            )?;
            if s.family == KernelFamily::Covariance {
                let emb = delay_embed(&obs.series, s.delays).map_err(|e| e.in_stage("embed"))?;
                let g = FrequencyGrid::new(emb.vectors.len(), obs.dt)?;
                let c = covariance_rkhs_norms(&ComplexSeries::from(&emb.vectors), &g)
                    .map_err(|e| e.in_stage("covariance"))?;
                write_columns_csv(
                    &s.out_dir.join("covariance_comparison.csv"),
                    &["omega", "w_rkhs", "power"],
                    &[&g.omegas(), &c.w, &c.power],
                )?;
            }
            Ok(())
        }
        Command::Extend {
            run_dir,
            candidate,
            points,
            output,
        } => {
            let manifest = read_manifest(&run_dir.join("manifest.json"))?;
            let weights = read_weights_csv(&candidate_weights_path(&run_dir, candidate)?)?;
            let pts = ingest_csv(&points, None)?.series;
            let gram = rebuild_kernel(&manifest).map_err(|e| e.in_stage("kernel"))?;
            if pts.dim() != gram.samples().dim() {
                return Err(Error::DimensionMismatch {
                    expected: gram.samples().dim(),
                    got: pts.dim(),
                });
            }
            let h = NystromFunction {
                n: weights.len(),
                weights,
                omega: None,
                l: manifest.selection.l1,
                rkhs_norm_sq: f64::NAN,
            };
            let mut out = CsvOut::create(&output, &["re", "im"])?;
            for x in pts.rows() {
                let v = h.evaluate(&gram, x).map_err(|e| e.in_stage("extend"))?;
                out.line([fmt_f64(v.re), fmt_f64(v.im)])?;
            }
            out.finish()
        }
        Command::Run { run } => {
            let outcome = run_pipeline(&run.config()?)?;
            let m = &outcome.manifest;
            if let Some(e) = m.epsilon {
                println!("epsilon {}", fmt_f64(e));
            }
            println!("candidates {}", m.candidates);
            for c in &outcome.candidates {
                println!("  omega {:+.6}  w_l1 {:.6}", c.candidate.omega, c.candidate.w_l1);
            }
            println!("output {}", outcome.settings.out_dir.display());
            Ok(())
        }
    }
}

fn spectrum(
    s: &RunSettings,
) -> Result<(NormTable, SpectralBasis, Option<f64>)> {
    let obs = load_observations(s).map_err(|e| e.in_stage("ingest"))?;
    let points = delay_embed(&obs.series, s.delays)
        .map_err(|e| e.in_stage("embed"))?
        .vectors;
    s.selection
        .validate(points.len())
        .map_err(|e| e.in_stage("configure"))?;
    let kernel = build_kernel(s, &points).map_err(|e| e.in_stage("kernel"))?;
    let basis = compute_basis(s, &kernel, &points).map_err(|e| e.in_stage("eigensolve"))?;
    let grid = FrequencyGrid::new(points.len(), obs.dt)?;
    let table = norm_table(&basis, &grid, &[s.selection.l0, s.selection.l1])
        .map_err(|e| e.in_stage("norms"))?;
    Ok((table, basis, kernel.epsilon))
}
