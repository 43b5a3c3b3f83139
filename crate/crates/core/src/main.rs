use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use equinorm::io::{self, Precision, RunMetadata};
use equinorm::metrics::{equivariance_error, EquivarianceReport, Group, Mix, TrialPlan};
use equinorm::norm::{init_params, InitScheme, Mode, NormConfig, Preset, RunningStats};
use equinorm::spectral::{aliasing_probe, ProbeResult};
use equinorm::synth::{gen_maps, Spectrum};
use equinorm::verify::{theorem_sweep, Thresholds, DEFAULT_SWEEP_MAPS};
use equinorm::{AffineParams, Dims, FeatureMap, Scalar};

#[derive(Parser)]
#[command(name = "equinorm", version, about = "Shift and translation equivariance of normalization layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic feature maps as tensor files.
    Gen(GenArgs),
    /// Monte-Carlo equivariance error per layer and group.
    Measure(MeasureArgs),
    /// Radial spectrum of upsampled, normalized maps and its aliasing band.
    Spectrum(SpectrumArgs),
    /// Classify every (center, scale, affine) configuration and check the prediction.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SeedArg {
    #[arg(long, env = "EQUINORM_SEED", default_value_t = 0)]
    seed: u64,
}

/// Input maps: a directory of tensor files or synthetic maps.
#[derive(Args)]
struct MapSource {
    /// Directory of .eqtn / .npy files.
    #[arg(long, conflicts_with = "synthetic")]
    maps: Option<PathBuf>,
    /// Dimensions B,C,H,W of synthetic maps.
    #[arg(long, value_parser = parse_dims, default_value = "8,16,32,32")]
    synthetic: Dims,
    /// Number of synthetic maps.
    #[arg(long, default_value_t = 8)]
    n_maps: usize,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_parser = parse_dims, default_value = "8,16,32,32")]
    dims: Dims,
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// `white` or `lowpass:BW` with BW in (0, 1/2].
    #[arg(long, default_value = "white")]
    spectrum: Spectrum,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MeasureArgs {
    /// Comma-separated preset names, or `all`.
    #[arg(long, default_value = "all")]
    layers: String,
    #[arg(long, value_delimiter = ',', default_value = "shift,translation")]
    groups: Vec<Group>,
    #[command(flatten)]
    source: MapSource,
    /// Spectrum of synthetic maps; the default has no Nyquist content.
    #[arg(long, default_value = "lowpass:0.5")]
    spectrum: Spectrum,
    #[arg(long, default_value_t = 64)]
    trials: usize,
    #[arg(long, value_delimiter = ',', default_value = "default,gaussian")]
    schemes: Vec<InitScheme>,
    /// Modes drawn for layers with running statistics.
    #[arg(long, value_delimiter = ',', default_value = "training,evaluation")]
    bn_modes: Vec<Mode>,
    /// Probability of evaluation mode when both modes are drawn.
    #[arg(long, default_value_t = 0.5)]
    eval_fraction: f64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
    #[command(flatten)]
    seed: SeedArg,
    /// CSV output; a JSON mirror is written alongside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpectrumArgs {
    /// Comma-separated preset names or `identity`; `all` means every shift-equivariant preset.
    #[arg(long, default_value = "all")]
    layers: String,
    #[command(flatten)]
    source: MapSource,
    #[arg(long, default_value = "white")]
    spectrum: Spectrum,
    #[arg(long, default_value_t = equinorm::spectral::DEFAULT_BINS)]
    bins: usize,
    #[arg(long, default_value = "gaussian")]
    scheme: InitScheme,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_parser = parse_dims, default_value = "2,3,8,8")]
    dims: Dims,
    /// Random maps per configuration; errors are maximized over them.
    #[arg(long, default_value_t = DEFAULT_SWEEP_MAPS)]
    maps_per_config: usize,
    #[arg(long, default_value_t = 1e-8)]
    t_lo: f64,
    #[arg(long, default_value_t = 1e-4)]
    t_hi: f64,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s
        .split([',', 'x', 'X'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let dims: Dims = parts.try_into().map_err(|p: Vec<usize>| format!("expected 4 dimensions, got {}", p.len()))?;
    if dims.contains(&0) {
        return Err("dimensions must be positive".into());
    }
    Ok(dims)
}

/// A named layer to run.
struct Layer {
    name: String,
    cfg: NormConfig,
}

fn parse_layers(list: &str, all: &[Preset]) -> Result<Vec<Layer>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(all.iter().map(|p| Layer { name: p.name().to_string(), cfg: p.config() }).collect());
    }
    list.split(',')
        .map(|name| {
            let name = name.trim();
            if name.eq_ignore_ascii_case("identity") {
                return Ok(Layer { name: "identity".into(), cfg: NormConfig::identity() });
            }
            let p: Preset = name.parse()?;
            Ok(Layer { name: p.name().to_string(), cfg: p.config() })
        })
        .collect()
}

fn mix<A: Copy + PartialEq>(items: &[A], what: &str) -> Result<Mix<A>> {
    let mut uniq: Vec<A> = Vec::new();
    for &i in items {
        if !uniq.contains(&i) {
            uniq.push(i);
        }
    }
    match uniq.as_slice() {
        [] => bail!("no {what} given"),
        [one] => Ok(Mix::Only(*one)),
        _ => Ok(Mix::Both),
    }
}

fn load_maps(src: &MapSource, spectrum: Spectrum, seed: u64) -> Result<Vec<FeatureMap<f64>>> {
    let maps = match &src.maps {
        Some(dir) => io::read_tensor_dir(dir)?,
        None => gen_maps(src.synthetic, src.n_maps, spectrum, seed)?,
    };
    if maps.is_empty() {
        bail!("no input maps");
    }
    Ok(maps)
}

fn json_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn run_gen(a: &GenArgs) -> Result<()> {
    let maps: Vec<FeatureMap<f64>> = gen_maps(a.dims, a.n, a.spectrum, a.seed.seed)?;
    let precision = match a.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };
    let paths = io::write_tensor_dir(&maps, &a.out, precision)?;
    println!("wrote {} map(s) to {}", paths.len(), a.out.display());
    Ok(())
}

fn measure_cells<T: Scalar>(
    layers: &[Layer],
    maps: &[FeatureMap<T>],
    plans: &[TrialPlan],
) -> Result<EquivarianceReport> {
    let mut report = EquivarianceReport::default();
    for layer in layers {
        for plan in plans {
            let cell = equivariance_error(&layer.name, &layer.cfg, maps, plan)
                .with_context(|| format!("{} under {}", layer.name, plan.group))?;
            report.cells.push(cell);
        }
    }
    Ok(report)
}

fn run_measure(a: &MeasureArgs) -> Result<()> {
    let seed = a.seed.seed;
    let layers = parse_layers(&a.layers, &Preset::ALL)?;
    let maps = load_maps(&a.source, a.spectrum, seed)?;
    let schemes = mix(&a.schemes, "init schemes")?;
    let bn_modes = mix(&a.bn_modes, "modes")?;
    let mut groups = Vec::new();
    for g in &a.groups {
        if !groups.contains(g) {
            groups.push(*g);
        }
    }
    let plans: Vec<TrialPlan> = groups
        .iter()
        .map(|&g| TrialPlan { group: g, n_trials: a.trials, schemes, bn_modes, eval_fraction: a.eval_fraction, seed })
        .collect();
    let report = match a.precision {
        PrecisionArg::F64 => measure_cells(&layers, &maps, &plans)?,
        PrecisionArg::F32 => {
            let maps: Vec<FeatureMap<f32>> = maps.iter().map(FeatureMap::cast).collect();
            measure_cells(&layers, &maps, &plans)?
        }
    };
    io::write_report(&report, &a.out)?;
    let mut meta = RunMetadata::new("measure", seed);
    meta.dims = Some(maps[0].dims());
    io::write_json(&meta, &report, json_path(&a.out))?;
    for c in &report.cells {
        println!("{:<14} {:<12} {:.3e} ± {:.1e}  (n = {})", c.layer, c.group, c.mean, c.stderr, c.n);
    }
    Ok(())
}

fn probe_layer(
    layer: &Layer,
    maps: &[FeatureMap<f64>],
    bins: usize,
    scheme: InitScheme,
    seed: u64,
) -> Result<ProbeResult> {
    let [b, c, h, w] = maps[0].dims();
    let params: AffineParams<f64> = init_params(&layer.cfg, [b, c, 2 * h, 2 * w], scheme, seed);
    let mut state = layer.cfg.track_running_stats.then(|| RunningStats::new(c));
    aliasing_probe(&layer.cfg, &params, state.as_mut(), maps, bins).with_context(|| layer.name.clone())
}

fn run_spectrum(a: &SpectrumArgs) -> Result<()> {
    let seed = a.seed.seed;
    let shift_equivariant: Vec<Preset> =
        Preset::ALL.into_iter().filter(|p| equinorm::classify_config(&p.config()).is_shift_equivariant()).collect();
    let layers = parse_layers(&a.layers, &shift_equivariant)?;
    let maps = load_maps(&a.source, a.spectrum, seed)?;
    let results: Vec<(String, ProbeResult)> = layers
        .iter()
        .map(|l| probe_layer(l, &maps, a.bins, a.scheme, seed).map(|r| (l.name.clone(), r)))
        .collect::<Result<_>>()?;
    let spectra: Vec<(&str, &equinorm::RadialPsd)> = results.iter().map(|(n, r)| (n.as_str(), &r.psd)).collect();
    io::write_psd(&spectra, &a.out)?;
    let mut meta = RunMetadata::new("spectrum", seed);
    meta.dims = Some(maps[0].dims());
    io::write_json(&meta, &results, json_path(&a.out))?;
    for (name, r) in &results {
        println!("{name:<14} aliasing energy {:.3e}  ratio {:.3e}", r.aliasing_energy, r.energy_ratio());
    }
    Ok(())
}

fn run_sweep(a: &SweepArgs) -> Result<bool> {
    let thresholds = Thresholds::new(a.t_lo, a.t_hi)?;
    let rows = theorem_sweep(a.dims, a.maps_per_config, a.seed.seed, thresholds)?;
    io::write_sweep(&rows, &a.out)?;
    let mut meta = RunMetadata::new("sweep", a.seed.seed);
    meta.dims = Some(a.dims);
    meta.thresholds = Some(thresholds);
    io::write_json(&meta, &rows, json_path(&a.out))?;

    let indeterminate = rows.iter().filter(|r| r.measured.is_none()).count();
    let disagree = rows.iter().filter(|r| !r.agrees()).count();
    println!("{} configurations, {} disagree ({} indeterminate)", rows.len(), disagree, indeterminate);
    for r in rows.iter().filter(|r| !r.agrees()).take(20) {
        eprintln!(
            "  center {} scale {} affine {}: predicted {}, shift {:.2e}, translation {:.2e}",
            r.center,
            r.scale,
            r.affine.map_or("none".to_string(), |x| x.to_string()),
            r.predicted,
            r.shift_error,
            r.translation_error
        );
    }
    Ok(disagree == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gen(a) => run_gen(a).map(|_| true),
        Command::Measure(a) => run_measure(a).map(|_| true),
        Command::Spectrum(a) => run_spectrum(a).map(|_| true),
        Command::Sweep(a) => run_sweep(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
