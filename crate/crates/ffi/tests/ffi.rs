use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use bridgecast_ffi::*;

fn last_error() -> String {
    let need = bc_last_error_length();
    let mut buf = vec![0 as c_char; need.max(1)];
    unsafe { bc_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn new_set(n: usize, channels: &[&str], samples: usize, data: &[f64]) -> *mut BcSnapshotSet {
    let names: Vec<CString> = channels.iter().map(|c| CString::new(*c).unwrap()).collect();
    let ptrs: Vec<*const c_char> = names.iter().map(|c| c.as_ptr()).collect();
    let subset = CString::new("test").unwrap();
    let mut set = ptr::null_mut();
    let status = unsafe { bc_snapshot_new(n, ptrs.as_ptr(), ptrs.len(), samples, data.as_ptr(), subset.as_ptr(), &mut set) };
    assert_eq!(status, BcStatus::Ok, "{}", last_error());
    set
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(bc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn schedule_calls_and_errors() {
    let s = bc_schedule_default();
    assert_eq!((s.sigma_min, s.sigma_max), (0.01, 10.0));
    let mut sigma = 0.0;
    assert_eq!(unsafe { bc_schedule_sigma(s, 0.5, &mut sigma) }, BcStatus::Ok);
    assert!((sigma - (1e-4f64 * 999.0).sqrt()).abs() < 1e-12);
    assert_eq!(bc_last_error_length(), 0);

    assert_eq!(unsafe { bc_schedule_sigma(s, 1.5, &mut sigma) }, BcStatus::InvalidArgument);
    assert!(last_error().contains("1.5"), "{}", last_error());
    assert_eq!(unsafe { bc_schedule_g(s, 0.5, ptr::null_mut()) }, BcStatus::NullPointer);
    let bad = BcSchedule { sigma_min: 1.0, sigma_max: 0.5 };
    assert_eq!(unsafe { bc_schedule_g(bad, 0.5, &mut sigma) }, BcStatus::InvalidArgument);

    // t* inverts sigma: psd = sigma^2 / N^2.
    let mut t = 0.0;
    let psd = sigma * sigma / (32.0 * 32.0);
    assert_eq!(unsafe { bc_t_star_from_psd(s, psd, 32, &mut t) }, BcStatus::Ok);
    assert!((t - 0.5).abs() < 1e-9);
}

#[test]
fn error_message_needs_room() {
    let s = bc_schedule_default();
    let mut out = 0.0;
    unsafe { bc_schedule_sigma(s, -1.0, &mut out) };
    let need = bc_last_error_length();
    assert!(need > 1);
    let mut small = [7 as c_char; 2];
    assert_eq!(unsafe { bc_last_error_message(small.as_mut_ptr(), 2) }, need);
    assert_eq!(small, [7, 7]);
}

#[test]
fn snapshot_round_trip() {
    let n = 8;
    let data: Vec<f64> = (0..3 * 2 * n * n).map(|i| (i as f64 * 0.37).sin()).collect();
    let set = new_set(n, &["vorticity", "context"], 3, &data);
    let (mut samples, mut channels, mut grid) = (0, 0, 0);
    assert_eq!(unsafe { bc_snapshot_shape(set, &mut samples, &mut channels, &mut grid) }, BcStatus::Ok);
    assert_eq!((samples, channels, grid), (3, 2, 8));

    let mut need = 0;
    assert_eq!(unsafe { bc_snapshot_channel_name(set, 1, ptr::null_mut(), 0, &mut need) }, BcStatus::Ok);
    assert_eq!(need, "context".len() + 1);
    let mut buf = vec![0 as c_char; need];
    unsafe { bc_snapshot_channel_name(set, 1, buf.as_mut_ptr(), need, ptr::null_mut()) };
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), "context");
    assert_eq!(unsafe { bc_snapshot_channel_name(set, 2, ptr::null_mut(), 0, &mut need) }, BcStatus::InvalidArgument);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("s.bcs").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bc_snapshot_write(set, path.as_ptr(), false) }, BcStatus::Ok);
    assert_eq!(unsafe { bc_snapshot_write(set, path.as_ptr(), false) }, BcStatus::InvalidArgument);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { bc_snapshot_read(path.as_ptr(), &mut back) }, BcStatus::Ok);
    let values = unsafe { std::slice::from_raw_parts(bc_snapshot_data(back), data.len()) };
    // Stored as f32 on disk.
    let rounded: Vec<f64> = data.iter().map(|&v| v as f32 as f64).collect();
    assert_eq!(values, &rounded[..]);

    let missing = CString::new(dir.path().join("nope.bcs").to_str().unwrap()).unwrap();
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { bc_snapshot_read(missing.as_ptr(), &mut none) }, BcStatus::Io);
    assert!(none.is_null());
    std::fs::write(dir.path().join("junk.bcs"), b"not a snapshot file at all").unwrap();
    let junk = CString::new(dir.path().join("junk.bcs").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bc_snapshot_read(junk.as_ptr(), &mut none) }, BcStatus::Format);

    unsafe {
        bc_snapshot_free(set);
        bc_snapshot_free(back);
        bc_snapshot_free(ptr::null_mut());
    }
}

#[test]
fn bad_layout_is_a_shape_error() {
    let names = [CString::new("u").unwrap()];
    let ptrs = [names[0].as_ptr()];
    let subset = CString::new("x").unwrap();
    let data = vec![0.0; 12 * 12];
    let mut set = ptr::null_mut();
    // 12 is not a power of two.
    let status = unsafe { bc_snapshot_new(12, ptrs.as_ptr(), 1, 1, data.as_ptr(), subset.as_ptr(), &mut set) };
    assert_eq!(status, BcStatus::Shape, "{}", last_error());
    assert!(set.is_null());
}

#[test]
fn psd_and_crossing() {
    let n = 16;
    let bands = bc_band_count(n);
    let target: Vec<f64> = (0..bands).map(|k| (1.0 + k as f64).powi(-3)).collect();
    let source: Vec<f64> = target.iter().enumerate().map(|(k, &v)| if k <= 4 { v } else { 0.0 }).collect();
    let mut k = BcKStar { k_star: 0, psd_star: 0.0, crossed: false };
    assert_eq!(unsafe { bc_find_k_star(source.as_ptr(), target.as_ptr(), bands, n, &mut k) }, BcStatus::Ok);
    assert_eq!(k.k_star, 4);
    assert!(k.crossed);
    assert_eq!(k.psd_star, target[4]);
    assert_eq!(unsafe { bc_find_k_star(source.as_ptr(), target.as_ptr(), bands - 1, n, &mut k) }, BcStatus::Shape);

    // Constant field: all power in band 0 without mean removal.
    let set = new_set(n, &["u"], 1, &vec![2.0; n * n]);
    let mut psd = vec![0.0; bands];
    let u = CString::new("u").unwrap();
    assert_eq!(unsafe { bc_azimuthal_psd(set, u.as_ptr(), false, psd.as_mut_ptr(), bands) }, BcStatus::Ok);
    assert!((psd[0] - 4.0).abs() < 1e-12);
    assert!(psd[1..].iter().all(|v| v.abs() < 1e-20));
    assert_eq!(unsafe { bc_azimuthal_psd(set, u.as_ptr(), false, psd.as_mut_ptr(), 3) }, BcStatus::InvalidArgument);
    let v = CString::new("v").unwrap();
    assert_eq!(unsafe { bc_azimuthal_psd(set, v.as_ptr(), false, psd.as_mut_ptr(), bands) }, BcStatus::Shape);
    unsafe { bc_snapshot_free(set) };
}

#[test]
fn gaussian_bridge_through_the_abi() {
    let n = 16;
    let s = bc_schedule_default();
    let u = CString::new("u").unwrap();
    let mut score = ptr::null_mut();
    assert_eq!(unsafe { bc_score_gaussian_power_law(u.as_ptr(), n, 1.0, 3.0, s, &mut score) }, BcStatus::Ok);
    let mut source = ptr::null_mut();
    assert_eq!(unsafe { bc_score_sample(score, 4, 1, &mut source) }, BcStatus::Ok);

    let mut values = ptr::null_mut();
    assert_eq!(unsafe { bc_score_evaluate(score, source, 0.5, &mut values) }, BcStatus::Ok);
    let mut shape = (0, 0, 0);
    unsafe { bc_snapshot_shape(values, &mut shape.0, &mut shape.1, &mut shape.2) };
    assert_eq!(shape, (4, 1, 16));

    let run = |seed: u64| {
        let mut out = ptr::null_mut();
        let status = unsafe { bc_downscale(score, source, ptr::null(), s, 4, 0.4, 50, 1e-5, seed, &mut out) };
        assert_eq!(status, BcStatus::Ok, "{}", last_error());
        let data = unsafe { std::slice::from_raw_parts(bc_snapshot_data(out), 4 * n * n) }.to_vec();
        unsafe { bc_snapshot_free(out) };
        data
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { bc_downscale(score, source, ptr::null(), s, 4, 2.0, 50, 1e-5, 3, &mut out) }, BcStatus::InvalidArgument);
    assert_eq!(unsafe { bc_downscale(ptr::null(), source, ptr::null(), s, 4, 0.4, 50, 1e-5, 3, &mut out) }, BcStatus::NullPointer);
    assert!(out.is_null());

    let missing = CString::new("/nonexistent/model.bckp").unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { bc_score_load(missing.as_ptr(), &mut net) }, BcStatus::Io);
    unsafe {
        bc_snapshot_free(values);
        bc_snapshot_free(source);
        bc_score_free(score);
    }
}

#[test]
fn header_declares_every_export() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/bridgecast.h")).unwrap();
    let src = std::fs::read_to_string(dir.join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 20);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    // Syntax-check the header as C when a compiler is around.
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", "-std=c11"]).arg(dir.join("include/bridgecast.h")).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
