use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{Cli, Command, Metric, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{self, DomainStats};
use crate::fields::{read_snapshot_set, write_snapshot_set, Field, GridSpec, SnapshotSet};
use crate::fluid::{run_simulation, saturation_field, SUPERSATURATION};
use crate::score::unet::{read_checkpoint, write_checkpoint};
use crate::score::{ScoreModel, UNetScore};
use crate::sde::{downscale, t_star_from_psd, BridgeConfig, FULL_INTERVAL_STEPS};
use crate::spectral::{azimuthal_psd, find_k_star, upsample_lowres};
use crate::training::{train, write_loss_csv, Preprocessor, TrainOptions};

const MODEL_FILE: &str = "model.bckp";
const PREPROCESS_FILE: &str = "preprocess.toml";
const LOSS_FILE: &str = "loss.csv";
const MANIFEST_FILE: &str = "manifest.toml";
const BRIDGE_CACHE_FILE: &str = "bridge.cache";

struct Context {
    cfg: PipelineConfig,
    seed: u64,
    seed_overridden: bool,
    force: bool,
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let ctx = Context { seed: cli.global.seed.unwrap_or(cfg.seed), seed_overridden: cli.global.seed.is_some(), force: cli.global.force, cfg };
    match cli.command {
        Command::Simulate { subset, out } => simulate(&ctx, &subset, &out),
        Command::Prepare { input, out } => prepare(&ctx, &input, &out),
        Command::Train { input, out } => train_cmd(&ctx, &input, &out),
        Command::Downscale { input, model, target, out, t_star } => downscale_cmd(&ctx, &input, &model, &target, &out, t_star),
        Command::Evaluate { metric, inputs, out } => evaluate(&ctx, metric, &inputs, &out),
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: String,
    seed: u64,
    config_digest: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    details: toml::Table,
}

impl Manifest {
    fn new(ctx: &Context, command: &str) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: ctx.seed,
            config_digest: ctx.cfg.digest()?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            details: toml::Table::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.outputs.insert(name, file_digest(path)?);
        Ok(())
    }

    fn detail(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.details.insert(key.to_string(), value.into());
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn prepare_dir(dir: &Path, guarded: &[&str], force: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    if !force {
        if let Some(existing) = guarded.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(Error::AlreadyExists(existing));
        }
    }
    Ok(())
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn simulate(ctx: &Context, subset: &str, out: &Path) -> Result<()> {
    let mut params = ctx.cfg.sim_params(subset)?;
    if ctx.seed_overridden || !ctx.cfg.sim_seed_explicit() {
        params.rng_seed = ctx.seed;
    }
    log::info!("simulating {subset}: {}^2, {} steps", params.n_grid, params.n_steps);
    let set = run_simulation(&params, subset)?;
    write_snapshot_set(&set, out, ctx.force)?;
    let mut m = Manifest::new(ctx, "simulate")?;
    m.output(out)?;
    m.detail("subset", subset);
    m.detail("sim_params_digest", params.digest());
    m.detail("snapshots", set.len() as i64);
    m.write(&sidecar(out, ".manifest.toml"))
}

fn prepare(ctx: &Context, input: &Path, out: &Path) -> Result<()> {
    let source = read_snapshot_set(input)?;
    let factor = ctx.cfg.bridge.upsample_factor;
    let fine = upsample_lowres(&source.samples, factor)?;
    let set = SnapshotSet {
        samples: fine,
        subset_name: format!("{}-upsampled", source.subset_name),
        sim_params_digest: source.sim_params_digest.clone(),
        spinup_discarded: source.spinup_discarded,
    };
    write_snapshot_set(&set, out, ctx.force)?;
    let mut m = Manifest::new(ctx, "prepare")?;
    m.input(input)?;
    m.output(out)?;
    m.detail("upsample_factor", factor as i64);
    m.write(&sidecar(out, ".manifest.toml"))
}

fn train_cmd(ctx: &Context, input: &Path, out: &Path) -> Result<()> {
    let data = read_snapshot_set(input)?;
    prepare_dir(out, &[MODEL_FILE, PREPROCESS_FILE, LOSS_FILE, MANIFEST_FILE], ctx.force)?;
    let pre = Preprocessor::fit(&data.samples)?;
    let scaled = pre.transform(&data.samples)?;
    let mut tcfg = ctx.cfg.train.clone();
    if ctx.seed_overridden || tcfg.rng_seed == 0 {
        tcfg.rng_seed = ctx.seed;
    }
    let mut model = UNetScore::new(ctx.cfg.unet.clone(), ctx.cfg.schedule, data.n(), data.channels(), tcfg.rng_seed)?;
    log::info!("training {} parameters on {} samples", model.params().len(), data.len());
    let outcome = train(&mut model, &scaled, &tcfg, &TrainOptions { checkpoint_dir: Some(out.to_path_buf()) })?;

    fs::write(out.join(PREPROCESS_FILE), pre.to_toml()?)?;
    let mut csv = create_file(&out.join(LOSS_FILE))?;
    write_loss_csv(&outcome.history, &mut csv)?;
    csv.flush()?;
    write_checkpoint(&model, &out.join(MODEL_FILE), true)?;

    let mut m = Manifest::new(ctx, "train")?;
    m.input(input)?;
    for f in [MODEL_FILE, PREPROCESS_FILE, LOSS_FILE] {
        m.output(&out.join(f))?;
    }
    m.detail("steps", outcome.history.len() as i64);
    m.detail("train_seed", tcfg.rng_seed as i64);
    if let Some(e) = outcome.best_epoch {
        m.detail("best_epoch", e as i64);
    }
    if let Some(err) = &outcome.aborted {
        m.detail("aborted", err.to_string());
    }
    m.write(&out.join(MANIFEST_FILE))?;
    match outcome.aborted {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

/// Cached spectral bridge estimate for one (source, target) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeEstimate {
    pub k_star: usize,
    pub psd_star: f64,
    pub t_star: f64,
}

/// `bridge.cache`: one line per pair, `source_digest target_digest k_star psd_star t_star`.
pub fn read_bridge_cache(path: &Path) -> Result<BTreeMap<(String, String), BridgeEstimate>> {
    let mut map = BTreeMap::new();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(map),
        Err(e) => return Err(e.into()),
    };
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed = (parts.len() == 5)
            .then(|| Some(BridgeEstimate { k_star: parts[2].parse().ok()?, psd_star: parts[3].parse().ok()?, t_star: parts[4].parse().ok()? }))
            .flatten();
        let est = parsed.ok_or_else(|| Error::Config(format!("{}:{}: malformed bridge cache line", path.display(), i + 1)))?;
        map.insert((parts[0].to_string(), parts[1].to_string()), est);
    }
    Ok(map)
}

fn write_bridge_cache(path: &Path, map: &BTreeMap<(String, String), BridgeEstimate>) -> Result<()> {
    let mut text = String::new();
    for ((s, t), e) in map {
        text.push_str(&format!("{s} {t} {} {:e} {:e}\n", e.k_star, e.psd_star, e.t_star));
    }
    fs::write(path, text)?;
    Ok(())
}

/// k* and t* per noised channel; the bridge uses the latest switchover.
fn estimate_bridge(model: &UNetScore, source: &Field, target: &Field) -> Result<BridgeEstimate> {
    let mut best: Option<BridgeEstimate> = None;
    for ch in model.noised_channels() {
        let ks = find_k_star(&azimuthal_psd(source, ch, false)?, &azimuthal_psd(target, ch, false)?)?;
        let t_star = t_star_from_psd(model.schedule(), ks.psd_star, source.n());
        log::info!("{ch}: k* = {}, psd* = {:.3e}, t* = {t_star:.4}", ks.k_star, ks.psd_star);
        if best.is_none_or(|b| t_star > b.t_star) {
            best = Some(BridgeEstimate { k_star: ks.k_star, psd_star: ks.psd_star, t_star });
        }
    }
    best.ok_or(Error::EmptySet)
}

fn downscale_cmd(ctx: &Context, input: &Path, model_dir: &Path, target_path: &Path, out: &Path, t_override: Option<f64>) -> Result<()> {
    let model = read_checkpoint(&model_dir.join(MODEL_FILE))?;
    let pre = Preprocessor::from_toml(&fs::read_to_string(model_dir.join(PREPROCESS_FILE))?)?;
    let source = read_snapshot_set(input)?;
    let target = read_snapshot_set(target_path)?;
    if source.n() != model.n_grid() || target.n() != model.n_grid() {
        return Err(Error::Shape(format!(
            "model is {}^2, source {}^2, target {}^2",
            model.n_grid(),
            source.n(),
            target.n()
        )));
    }
    let src = pre.transform_present(&source.samples)?;
    let tgt = pre.transform_present(&target.samples)?;

    let cache_path = model_dir.join(BRIDGE_CACHE_FILE);
    let mut cache = read_bridge_cache(&cache_path)?;
    let key = (file_digest(input)?, file_digest(target_path)?);
    let estimate = match cache.get(&key) {
        Some(e) => *e,
        None => {
            let e = estimate_bridge(&model, &src, &tgt)?;
            cache.insert(key, e);
            write_bridge_cache(&cache_path, &cache)?;
            e
        }
    };
    let t_end = ctx.cfg.bridge.t_end;
    let mut t_star = t_override.or(ctx.cfg.bridge.t_star).unwrap_or(estimate.t_star);
    if !(t_star > t_end && t_star <= 1.0) {
        if t_override.is_some() {
            return Err(Error::Config(format!("--t-star {t_star} outside (t_end, 1]")));
        }
        log::warn!("switchover t* = {t_star} not above t_end; using 2 t_end");
        t_star = 2.0 * t_end;
    }
    let n_steps = ctx.cfg.bridge.n_steps.unwrap_or_else(|| {
        ((FULL_INTERVAL_STEPS as f64 * (t_star - t_end) / (1.0 - t_end)).ceil() as usize).max(1)
    });
    let bcfg = BridgeConfig::with_steps(*model.schedule(), estimate.k_star, t_star, n_steps, t_end)?;

    let take = ctx.cfg.bridge.samples.unwrap_or(src.samples()).min(src.samples());
    let idx: Vec<usize> = (0..take).collect();
    let src = src.select_samples(&idx);
    let context = if model.context_channels().is_empty() {
        None
    } else {
        let one = tgt.select_channels(model.context_channels())?.sample(0);
        Some(Field::concat_samples(&vec![one; take])?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    log::info!("bridging {take} samples from t* = {t_star:.4} in {n_steps} steps");
    let result = downscale(&src, context.as_ref(), &model, &bcfg, &mut rng)?;
    let physical = pre.inverse_present(&result)?;
    let set = SnapshotSet {
        samples: physical,
        subset_name: format!("downscaled:{}", source.subset_name),
        sim_params_digest: source.sim_params_digest.clone(),
        spinup_discarded: source.spinup_discarded,
    };
    write_snapshot_set(&set, out, ctx.force)?;

    let mut m = Manifest::new(ctx, "downscale")?;
    m.input(input)?;
    m.input(target_path)?;
    m.input(&model_dir.join(MODEL_FILE))?;
    m.output(out)?;
    m.detail("k_star", estimate.k_star as i64);
    m.detail("psd_star", estimate.psd_star);
    m.detail("t_star", t_star);
    m.detail("n_steps", n_steps as i64);
    m.detail("samples", take as i64);
    m.write(&sidecar(out, ".manifest.toml"))
}

fn labels(inputs: &[PathBuf]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    inputs
        .iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "set".into());
            let count = seen.entry(stem.clone()).or_insert(0);
            *count += 1;
            if *count == 1 {
                stem
            } else {
                format!("{stem}-{count}")
            }
        })
        .collect()
}

fn noised_names(field: &Field) -> Vec<String> {
    field.noised_channels().into_iter().map(|c| field.channels()[c].clone()).collect()
}

fn evaluate(ctx: &Context, metric: Metric, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let sets: Vec<SnapshotSet> = inputs.iter().map(|p| read_snapshot_set(p)).collect::<Result<_>>()?;
    let labels = labels(inputs);
    let e = &ctx.cfg.eval;
    let mut m = Manifest::new(ctx, "evaluate")?;
    let mut written = Vec::new();
    let metric_name = match metric {
        Metric::Psd => "psd",
        Metric::Kde => "kde",
        Metric::Condensation => "condensation",
        Metric::L2 => "l2",
    };
    prepare_dir(out, &[MANIFEST_FILE, &format!("{metric_name}.csv"), &format!("{metric_name}_summary.csv")], ctx.force)?;

    match metric {
        Metric::Psd => {
            let channels = noised_names(&sets[0].samples);
            let ch: Vec<&str> = channels.iter().map(String::as_str).collect();
            let named: Vec<(&str, &Field)> = labels.iter().map(String::as_str).zip(sets.iter().map(|s| &s.samples)).collect();
            let curves = eval::compare_psd(&named, &ch, e.n_boot, e.ci, ctx.seed)?;
            let csv = out.join("psd.csv");
            let mut w = create_file(&csv)?;
            eval::write_psd_comparison_csv(&curves, &mut w)?;
            w.flush()?;
            eval::plot_psd_png(&curves, &out.join("psd.png"))?;
            written.push(csv);
        }
        Metric::Kde => {
            let mut summary = String::from("label,channel,kind,mean_variance,variance_ratio\n");
            for ch in noised_names(&sets[0].samples) {
                let mut reference_var = None;
                for (label, set) in labels.iter().zip(&sets) {
                    let c = set.samples.channel_index(&ch)?;
                    let pixels: Vec<f64> = (0..set.len()).flat_map(|s| set.samples.grid(s, c).iter().copied()).collect();
                    let curve = eval::kde_pdf(&pixels, e.n_boot, e.ci, ctx.seed)?;
                    let path = out.join(format!("kde_{label}_{ch}.csv"));
                    let mut w = create_file(&path)?;
                    eval::write_kde_csv(&curve, &mut w)?;
                    w.flush()?;
                    written.push(path);

                    let means = set.samples.channel_mean(&ch)?;
                    let mu = means.iter().sum::<f64>() / means.len() as f64;
                    let var = means.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / means.len() as f64;
                    let ratio = var / *reference_var.get_or_insert(var);
                    summary.push_str(&format!("{label},{ch},mean,{var:e},{ratio:e}\n"));
                    if means.len() >= eval::MIN_KDE_SAMPLES && var > 0.0 {
                        let curve = eval::kde_pdf(&means, e.n_boot, e.ci, ctx.seed)?;
                        let path = out.join(format!("kde_mean_{label}_{ch}.csv"));
                        let mut w = create_file(&path)?;
                        eval::write_kde_csv(&curve, &mut w)?;
                        w.flush()?;
                        written.push(path);
                    } else {
                        log::warn!("{label}/{ch}: too few or constant spatial means for a KDE");
                    }
                }
            }
            let path = out.join("kde_summary.csv");
            fs::write(&path, summary)?;
            written.push(path);
        }
        Metric::Condensation => {
            let params = ctx.cfg.sim_params("low-res")?;
            let rates: Vec<Vec<f64>> = sets
                .iter()
                .map(|set| {
                    let grid = GridSpec::new(params.domain_length, set.n())?;
                    let q_s = saturation_profile(&set.samples, &grid, params.gamma)?;
                    eval::positive_condensation_rates(&set.samples, &q_s, params.tau)
                })
                .collect::<Result<_>>()?;
            let marker = eval::tail_marker(&rates[0], e.tail_percentile);
            let mut summary = String::from("label,marker,density,ci_low,ci_high,positive_fraction\n");
            for ((label, set), r) in labels.iter().zip(&sets).zip(&rates) {
                let curve = eval::kde_pdf(r, e.n_boot, e.ci, ctx.seed)?;
                let path = out.join(format!("condensation_{label}.csv"));
                let mut w = create_file(&path)?;
                eval::write_kde_csv(&curve, &mut w)?;
                w.flush()?;
                written.push(path);
                let (lo, hi) = curve.ci_at(marker);
                let frac = r.len() as f64 / (set.len() * set.n() * set.n()) as f64;
                summary.push_str(&format!("{label},{marker:e},{:e},{lo:e},{hi:e},{frac:e}\n", curve.density_at(marker)));
            }
            let path = out.join("condensation_summary.csv");
            fs::write(&path, summary)?;
            written.push(path);
        }
        Metric::L2 => {
            if sets.len() != 2 {
                return Err(Error::Config("l2 takes exactly two inputs: outputs, then sources".into()));
            }
            let k_star = e.k_star.ok_or_else(|| Error::Config("l2 needs eval.k_star in the config".into()))?;
            let channels = noised_names(&sets[0].samples);
            let outputs = sets[0].samples.select_channels(&channels)?;
            // Downscaling bridges the leading source samples, in order.
            if sets[1].len() < outputs.samples() {
                return Err(Error::Shape(format!("{} outputs but only {} sources", outputs.samples(), sets[1].len())));
            }
            let lead: Vec<usize> = (0..outputs.samples()).collect();
            let sources = sets[1].samples.select_channels(&channels)?.select_samples(&lead);
            let report = eval::l2_report(
                &outputs,
                &sources,
                k_star,
                &DomainStats::per_channel(&outputs)?,
                &DomainStats::per_channel(&sources)?,
                e.n_random_pairs,
                ctx.seed,
            )?;
            let path = out.join("l2.csv");
            let mut w = create_file(&path)?;
            eval::write_l2_csv(&report, &mut w)?;
            w.flush()?;
            written.push(path);
            let mut summary = String::from("channel,paired_median,random_median,confidence\n");
            for (c, ch) in report.channels.iter().enumerate() {
                let conf = eval::median_gap_confidence(&report.paired[c], &report.random[c], e.n_boot, ctx.seed);
                summary.push_str(&format!("{ch},{:e},{:e},{conf}\n", report.paired_summary(c)[2], report.random_summary(c)[2]));
            }
            let path = out.join("l2_summary.csv");
            fs::write(&path, summary)?;
            written.push(path);
        }
    }
    for p in inputs {
        m.input(p)?;
    }
    for p in &written {
        m.output(p)?;
    }
    m.detail("metric", metric_name);
    m.write(&out.join(MANIFEST_FILE))
}

/// `q_s = gamma y + context` per sample, or `gamma y` without a context channel.
fn saturation_profile(set: &Field, grid: &GridSpec, gamma: f64) -> Result<Field> {
    set.channel_index(SUPERSATURATION)?;
    let base = saturation_field(grid, gamma, 0.0, 1);
    let ctx = set.context_channels();
    match ctx.first() {
        None => Ok(base),
        Some(&c) => Field::from_fn(set.n(), &["q_s"], set.samples(), |s, _, x, y| {
            let i = y * set.n() + x;
            base.data()[i] + set.grid(s, c)[i]
        }),
    }
}
