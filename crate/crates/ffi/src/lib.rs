//! C ABI for bridgecast.
//!
//! Every fallible call returns a [`BcStatus`]. On failure the message is kept
//! per thread and can be fetched with [`bc_last_error_message`]. Objects are
//! handed out as opaque pointers and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bridgecast::fields::{read_snapshot_set, write_snapshot_set};
use bridgecast::score::unet::read_checkpoint;
use bridgecast::score::{GaussianFieldScore, ScoreModel, UNetScore};
use bridgecast::sde::{self, BridgeConfig, NoiseSchedule};
use bridgecast::spectral::{self, PsdCurve};
use bridgecast::{Error, Field, SnapshotSet};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed file or config: bad magic, version, checksum, truncation.
    Format = 4,
    Shape = 5,
    Runtime = 6,
    Panic = 7,
}

impl From<&Error> for BcStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io(_) => BcStatus::Io,
            Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::Truncated(_) | Error::ChecksumMismatch { .. } | Error::Config(_) => {
                BcStatus::Format
            }
            Error::Shape(_) | Error::InvalidGrid(_) | Error::UnknownChannel(_) => BcStatus::Shape,
            Error::InvalidParameter(_) | Error::AlreadyExists(_) => BcStatus::InvalidArgument,
            _ => BcStatus::Runtime,
        }
    }
}

/// Noise schedule `sigma(t)` between `sigma_min` and `sigma_max`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Spectral crossing between a source and a target PSD.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcKStar {
    pub k_star: usize,
    pub psd_star: f64,
    /// False when the curves never cross and the closest band was used.
    pub crossed: bool,
}

/// A set of snapshots: samples x channels x N x N values.
pub struct BcSnapshotSet(SnapshotSet);

/// A score model: an analytic Gaussian-field score or a trained network.
pub struct BcScore(ScoreKind);

enum ScoreKind {
    Gaussian(GaussianFieldScore),
    Network(Box<UNetScore>),
}

impl ScoreKind {
    fn model(&self) -> &dyn ScoreModel {
        match self {
            ScoreKind::Gaussian(g) => g,
            ScoreKind::Network(n) => n.as_ref(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(BcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(BcStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(BcStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BcStatus::InvalidArgument, msg.into())
}

fn run(f: impl FnOnce() -> Result<(), Failure>) -> BcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            BcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            BcStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn schedule(s: &BcSchedule) -> Result<NoiseSchedule, Failure> {
    Ok(NoiseSchedule::new(s.sigma_min, s.sigma_max)?)
}

/// Copies `text` with a terminating NUL into `buf` if it fits. Returns the
/// size needed including the NUL.
unsafe fn copy_string(text: &[u8], buf: *mut c_char, len: usize) -> usize {
    let need = text.len() + 1;
    if !buf.is_null() && len >= need {
        ptr::copy_nonoverlapping(text.as_ptr().cast::<c_char>(), buf, text.len());
        *buf.add(text.len()) = 0;
    }
    need
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Size of the last error message on this thread including the NUL, or 0.
#[no_mangle]
pub extern "C" fn bc_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len() + 1))
}

/// Copies the last error message into `buf` when `len` is large enough.
/// Returns the size needed including the NUL, or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        Some(c) => copy_string(c.as_bytes(), buf, len),
        None => 0,
    })
}

#[no_mangle]
pub extern "C" fn bc_schedule_default() -> BcSchedule {
    let s = NoiseSchedule::default();
    BcSchedule { sigma_min: s.sigma_min, sigma_max: s.sigma_max }
}

/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn bc_schedule_sigma(s: BcSchedule, t: f64, out_sigma: *mut f64) -> BcStatus {
    run(|| {
        *out(out_sigma, "out_sigma")? = schedule(&s)?.sigma(t)?;
        Ok(())
    })
}

/// # Safety
/// `out_g` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn bc_schedule_g(s: BcSchedule, t: f64, out_g: *mut f64) -> BcStatus {
    run(|| {
        *out(out_g, "out_g")? = schedule(&s)?.g(t)?;
        Ok(())
    })
}

/// Switchover time at which the noise power per band equals `psd_star`.
///
/// # Safety
/// `out_t` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn bc_t_star_from_psd(s: BcSchedule, psd_star: f64, n_grid: usize, out_t: *mut f64) -> BcStatus {
    run(|| {
        if n_grid == 0 || !(psd_star >= 0.0) {
            return Err(invalid("need n_grid > 0 and psd_star >= 0"));
        }
        *out(out_t, "out_t")? = sde::t_star_from_psd(&schedule(&s)?, psd_star, n_grid);
        Ok(())
    })
}

/// Number of PSD bands for an `n_grid` x `n_grid` field.
#[no_mangle]
pub extern "C" fn bc_band_count(n_grid: usize) -> usize {
    spectral::band_count(n_grid)
}

/// Reads a snapshot file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_set` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_snapshot_read(path: *const c_char, out_set: *mut *mut BcSnapshotSet) -> BcStatus {
    run(|| {
        let slot = out(out_set, "out_set")?;
        let set = read_snapshot_set(&PathBuf::from(string(path, "path")?))?;
        *slot = Box::into_raw(Box::new(BcSnapshotSet(set)));
        Ok(())
    })
}

/// Writes a snapshot file, refusing to replace an existing one unless `force`.
///
/// # Safety
/// `set` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bc_snapshot_write(set: *const BcSnapshotSet, path: *const c_char, force: bool) -> BcStatus {
    run(|| {
        let set = borrow(set, "set")?;
        write_snapshot_set(&set.0, &PathBuf::from(string(path, "path")?), force)?;
        Ok(())
    })
}

/// Builds a set from `samples * n_channels * n_grid * n_grid` values laid
/// out sample-major, then channel, then row (`y`), then column (`x`).
/// Channels whose name starts with `context` are conditioning inputs.
///
/// # Safety
/// `channels` must hold `n_channels` NUL-terminated strings, `data` the
/// values described above and `subset_name` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bc_snapshot_new(
    n_grid: usize,
    channels: *const *const c_char,
    n_channels: usize,
    samples: usize,
    data: *const f64,
    subset_name: *const c_char,
    out_set: *mut *mut BcSnapshotSet,
) -> BcStatus {
    run(|| {
        let slot = out(out_set, "out_set")?;
        if channels.is_null() {
            return Err(null("channels"));
        }
        let names: Vec<String> =
            (0..n_channels).map(|i| string(*channels.add(i), "channel name")).collect::<Result<_, _>>()?;
        let len = samples
            .checked_mul(n_channels)
            .and_then(|v| v.checked_mul(n_grid))
            .and_then(|v| v.checked_mul(n_grid))
            .ok_or_else(|| invalid("set size overflows"))?;
        let values = slice(data, len, "data")?.to_vec();
        let field = Field::new(n_grid, names, samples, values)?;
        let set = SnapshotSet::new(field, string(subset_name, "subset_name")?)?;
        *slot = Box::into_raw(Box::new(BcSnapshotSet(set)));
        Ok(())
    })
}

/// # Safety
/// `set` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bc_snapshot_free(set: *mut BcSnapshotSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// # Safety
/// `set` must come from this library; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn bc_snapshot_shape(
    set: *const BcSnapshotSet,
    out_samples: *mut usize,
    out_channels: *mut usize,
    out_n_grid: *mut usize,
) -> BcStatus {
    run(|| {
        let f = &borrow(set, "set")?.0.samples;
        for (p, v) in [(out_samples, f.samples()), (out_channels, f.n_channels()), (out_n_grid, f.n())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies channel `index`'s name into `buf` when it fits; `out_needed`
/// receives the size including the NUL.
///
/// # Safety
/// `set` must come from this library; `buf` must be null or hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn bc_snapshot_channel_name(
    set: *const BcSnapshotSet,
    index: usize,
    buf: *mut c_char,
    len: usize,
    out_needed: *mut usize,
) -> BcStatus {
    run(|| {
        let f = &borrow(set, "set")?.0.samples;
        let name = f.channels().get(index).ok_or_else(|| invalid(format!("channel {index} of {}", f.n_channels())))?;
        let need = copy_string(name.as_bytes(), buf, len);
        if let Some(p) = out_needed.as_mut() {
            *p = need;
        }
        Ok(())
    })
}

/// Borrowed pointer to the set's values (layout as in [`bc_snapshot_new`]),
/// valid until the set is freed. Null for a null set.
///
/// # Safety
/// `set` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn bc_snapshot_data(set: *const BcSnapshotSet) -> *const f64 {
    set.as_ref().map_or(ptr::null(), |s| s.0.samples.data().as_ptr())
}

/// Azimuthal PSD of one channel averaged over samples; writes
/// [`bc_band_count`] values into `out_psd`.
///
/// # Safety
/// `set` must come from this library, `channel` be a NUL-terminated string
/// and `out_psd` hold `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn bc_azimuthal_psd(
    set: *const BcSnapshotSet,
    channel: *const c_char,
    subtract_mean: bool,
    out_psd: *mut f64,
    out_len: usize,
) -> BcStatus {
    run(|| {
        let set = borrow(set, "set")?;
        let curve = spectral::azimuthal_psd(&set.0.samples, &string(channel, "channel")?, subtract_mean)?;
        if out_len < curve.values.len() {
            return Err(invalid(format!("out_len {out_len} below band count {}", curve.values.len())));
        }
        if out_psd.is_null() {
            return Err(null("out_psd"));
        }
        ptr::copy_nonoverlapping(curve.values.as_ptr(), out_psd, curve.values.len());
        Ok(())
    })
}

/// Smallest band where the source and target spectra cross. Both arrays
/// hold [`bc_band_count`]`(n_grid)` values.
///
/// # Safety
/// `source` and `target` must hold `len` values; `out_k` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_find_k_star(
    source: *const f64,
    target: *const f64,
    len: usize,
    n_grid: usize,
    out_k: *mut BcKStar,
) -> BcStatus {
    run(|| {
        let slot = out(out_k, "out_k")?;
        let src = PsdCurve::from_values("u", n_grid, slice(source, len, "source")?.to_vec())?;
        let tgt = PsdCurve::from_values("u", n_grid, slice(target, len, "target")?.to_vec())?;
        let k = spectral::find_k_star(&src, &tgt)?;
        *slot = BcKStar { k_star: k.k_star, psd_star: k.psd_star, crossed: k.crossed };
        Ok(())
    })
}

/// Exact score of a stationary Gaussian field with mode variance
/// `amplitude * (1 + |k|)^-exponent`, on channel `channel`.
///
/// # Safety
/// `channel` must be a NUL-terminated string; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_score_gaussian_power_law(
    channel: *const c_char,
    n_grid: usize,
    amplitude: f64,
    exponent: f64,
    s: BcSchedule,
    out_score: *mut *mut BcScore,
) -> BcStatus {
    run(|| {
        let slot = out(out_score, "out_score")?;
        let g = GaussianFieldScore::power_law(&string(channel, "channel")?, n_grid, amplitude, exponent, schedule(&s)?)?;
        *slot = Box::into_raw(Box::new(BcScore(ScoreKind::Gaussian(g))));
        Ok(())
    })
}

/// Loads a trained network checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_score_load(path: *const c_char, out_score: *mut *mut BcScore) -> BcStatus {
    run(|| {
        let slot = out(out_score, "out_score")?;
        let model = read_checkpoint(&PathBuf::from(string(path, "path")?))?;
        *slot = Box::into_raw(Box::new(BcScore(ScoreKind::Network(Box::new(model)))));
        Ok(())
    })
}

/// # Safety
/// `score` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bc_score_free(score: *mut BcScore) {
    if !score.is_null() {
        drop(Box::from_raw(score));
    }
}

/// Draws `samples` fields from a Gaussian score's prior.
///
/// # Safety
/// `score` must come from this library; `out_set` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_score_sample(score: *const BcScore, samples: usize, seed: u64, out_set: *mut *mut BcSnapshotSet) -> BcStatus {
    run(|| {
        let slot = out(out_set, "out_set")?;
        let ScoreKind::Gaussian(g) = &borrow(score, "score")?.0 else {
            return Err(invalid("only Gaussian scores can be sampled directly"));
        };
        let field = g.sample(samples, &mut ChaCha8Rng::seed_from_u64(seed));
        *slot = Box::into_raw(Box::new(BcSnapshotSet(SnapshotSet::new(field, "gaussian")?)));
        Ok(())
    })
}

/// Score of every sample of `x` at time `t`, on the model's noised channels.
///
/// # Safety
/// `score` and `x` must come from this library; `out_set` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_score_evaluate(score: *const BcScore, x: *const BcSnapshotSet, t: f64, out_set: *mut *mut BcSnapshotSet) -> BcStatus {
    run(|| {
        let slot = out(out_set, "out_set")?;
        let model = borrow(score, "score")?.0.model();
        let x = &borrow(x, "x")?.0.samples;
        let s = model.evaluate(x, &vec![t; x.samples()])?;
        *slot = Box::into_raw(Box::new(BcSnapshotSet(SnapshotSet::new(s, "score")?)));
        Ok(())
    })
}

/// Bridges `source` into the score's domain: noise to `t_star`, then
/// integrate back to `t_end` in `n_steps` steps. `context` may be null; when
/// given it supplies the context channels, one sample per source sample.
///
/// # Safety
/// Handles must come from this library; `context` may be null; `out_set`
/// must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn bc_downscale(
    score: *const BcScore,
    source: *const BcSnapshotSet,
    context: *const BcSnapshotSet,
    s: BcSchedule,
    k_star: usize,
    t_star: f64,
    n_steps: usize,
    t_end: f64,
    seed: u64,
    out_set: *mut *mut BcSnapshotSet,
) -> BcStatus {
    run(|| {
        let slot = out(out_set, "out_set")?;
        let model = borrow(score, "score")?.0.model();
        let src = borrow(source, "source")?;
        let ctx = context.as_ref().map(|c| &c.0.samples);
        let cfg = BridgeConfig::with_steps(schedule(&s)?, k_star, t_star, n_steps, t_end)?;
        let result = sde::downscale(&src.0.samples, ctx, model, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let mut set = SnapshotSet::new(result, format!("downscaled:{}", src.0.subset_name))?;
        set.sim_params_digest = src.0.sim_params_digest.clone();
        set.spinup_discarded = src.0.spinup_discarded;
        *slot = Box::into_raw(Box::new(BcSnapshotSet(set)));
        Ok(())
    })
}
