use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use dsmyolo::ssm::{selective_scan_seq, Discretization, Projection, SsmParams};
use dsmyolo::Tensor;
use dsmyolo_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dsm_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn new_model(scale: &str, classes: u32) -> *mut DsmModel {
    let s = CString::new(scale).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { dsm_model_new(s.as_ptr(), classes, 0, &mut m) },
        DsmStatus::Ok
    );
    assert!(!m.is_null());
    m
}

#[test]
fn counts_match_the_rust_model() {
    let m = new_model("N", 80);
    let (mut params, mut flops, mut nc) = (0u64, 0u64, 0u32);
    unsafe {
        assert_eq!(dsm_model_param_count(m, &mut params), DsmStatus::Ok);
        assert_eq!(dsm_model_flops(m, 640, 640, &mut flops), DsmStatus::Ok);
        assert_eq!(dsm_model_num_classes(m, &mut nc), DsmStatus::Ok);
        dsm_model_free(m);
    }
    let model = dsmyolo::model::Model::<f32>::build(
        &dsmyolo::model::ModelConfig::new(dsmyolo::model::ScaleSpec::nano(80)),
        0,
    )
    .unwrap();
    assert_eq!(params, model.count_params());
    assert_eq!(flops, model.count_flops(640, 640).unwrap());
    assert_eq!(nc, 80);
}

#[test]
fn errors_carry_codes_and_messages() {
    let bad = CString::new("Q").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { dsm_model_new(bad.as_ptr(), 3, 0, &mut m) },
        DsmStatus::Config
    );
    assert!(m.is_null());
    assert!(last_error().contains("unknown scale"), "{}", last_error());

    let mut out = 0u64;
    assert_eq!(
        unsafe { dsm_model_param_count(ptr::null(), &mut out) },
        DsmStatus::NullPointer
    );
    assert!(last_error().contains("model"));

    let m = new_model("T", 3);
    assert_eq!(unsafe { dsm_model_param_count(m, &mut out) }, DsmStatus::Ok);
    assert_eq!(last_error(), "");
    let missing = CString::new("/nonexistent/checkpoint").unwrap();
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { dsm_model_load(missing.as_ptr(), &mut loaded) },
        DsmStatus::Io
    );
    let name = unsafe { CStr::from_ptr(dsm_status_name(DsmStatus::BufferTooSmall)) };
    assert_eq!(name.to_str().unwrap(), "buffer too small");
    unsafe { dsm_model_free(m) };
    unsafe { dsm_model_free(ptr::null_mut()) };
}

#[test]
fn save_load_and_detect() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("ck").to_str().unwrap()).unwrap();
    let m = new_model("T", 3);
    let mut loaded = ptr::null_mut();
    unsafe {
        assert_eq!(dsm_model_save(m, path.as_ptr()), DsmStatus::Ok);
        assert_eq!(dsm_model_load(path.as_ptr(), &mut loaded), DsmStatus::Ok);
    }
    let (h, w) = (48usize, 80usize);
    let img: Vec<f32> = (0..3 * h * w).map(|i| (i % 97) as f32 / 97.0).collect();
    let run = |model: *const DsmModel, cap: usize| {
        let mut dets = vec![
            DsmDetection {
                x1: 0.0,
                y1: 0.0,
                x2: 0.0,
                y2: 0.0,
                score: 0.0,
                class_id: 0
            };
            cap
        ];
        let mut count = 0usize;
        let st = unsafe {
            dsm_model_detect(
                model,
                img.as_ptr(),
                h,
                w,
                64,
                0.0,
                20,
                dets.as_mut_ptr(),
                cap,
                &mut count,
            )
        };
        (st, dets, count)
    };
    let (st, dets, count) = run(m, 20);
    assert_eq!(st, DsmStatus::Ok);
    // candidates that fall entirely in the letterbox padding are dropped
    assert!((6..=20).contains(&count), "{count}");
    let dets = dets[..count].to_vec();
    for d in &dets {
        assert!(
            0.0 <= d.x1
                && d.x1 < d.x2
                && d.x2 <= w as f32
                && 0.0 <= d.y1
                && d.y1 < d.y2
                && d.y2 <= h as f32
        );
        assert!(d.class_id < 3);
    }
    assert!(dets.windows(2).all(|p| p[0].score >= p[1].score));
    assert_eq!(run(loaded, 20).1[..count], dets[..]);

    let (st, few, count) = run(m, 5);
    assert_eq!((st, count), (DsmStatus::BufferTooSmall, dets.len()));
    assert_eq!(few[..], dets[..5]);

    let mut count = 0usize;
    let st = unsafe {
        dsm_model_detect(
            m,
            img.as_ptr(),
            h,
            w,
            50,
            0.25,
            10,
            ptr::null_mut(),
            0,
            &mut count,
        )
    };
    assert_eq!(st, DsmStatus::InvalidArgument);
    unsafe {
        dsm_model_free(m);
        dsm_model_free(loaded);
    }
}

#[test]
fn scan_matches_the_rust_kernel() {
    let (l, d, n) = (13usize, 3usize, 4usize);
    let gen = |k: usize, lo: f32, hi: f32| -> Vec<f32> {
        (0..k)
            .map(|i| lo + (hi - lo) * ((i * 7919 + k) % 101) as f32 / 101.0)
            .collect()
    };
    let (x, delta, a, b, p, q) = (
        gen(l * d, -1.0, 1.0),
        gen(l * d, 0.01, 0.5),
        gen(d * n, -2.0, -0.1),
        gen(l * n, -1.0, 1.0),
        gen(l * n, -1.0, 1.0),
        gen(d, -1.0, 1.0),
    );
    let params = SsmParams {
        a: Tensor::new(&[d, n], a.clone()).unwrap(),
        b: Projection::PerStep(Tensor::new(&[l, n], b.clone()).unwrap()),
        p: Projection::PerStep(Tensor::new(&[l, n], p.clone()).unwrap()),
        q: q.clone(),
        delta: Tensor::new(&[l, d], delta.clone()).unwrap(),
        discretization: Discretization::Zoh,
    };
    let want = selective_scan_seq(&Tensor::new(&[l, d], x.clone()).unwrap(), &params).unwrap();
    for block_len in [0, 4] {
        let (mut y, mut h) = (vec![0f32; l * d], vec![0f32; d * n]);
        let st = unsafe {
            dsm_selective_scan(
                l,
                d,
                n,
                x.as_ptr(),
                delta.as_ptr(),
                a.as_ptr(),
                b.as_ptr(),
                p.as_ptr(),
                q.as_ptr(),
                1,
                DsmDiscretization::Zoh,
                block_len,
                y.as_mut_ptr(),
                h.as_mut_ptr(),
            )
        };
        assert_eq!(st, DsmStatus::Ok, "{}", last_error());
        assert_eq!(y, want.y.data());
        assert_eq!(h, want.h_final.data());
    }
    let mut y = vec![0f32; l * d];
    let st = unsafe {
        dsm_selective_scan(
            l,
            d,
            n,
            x.as_ptr(),
            ptr::null(),
            a.as_ptr(),
            b.as_ptr(),
            p.as_ptr(),
            q.as_ptr(),
            1,
            DsmDiscretization::Taylor,
            0,
            y.as_mut_ptr(),
            ptr::null_mut(),
        )
    };
    assert_eq!(st, DsmStatus::NullPointer);
    assert!(last_error().contains("delta"));
}

/// Builds the static library, compiles `tests/smoke.c` against it and the
/// generated header, then runs the program.
#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/abi-<hash> -> target/; a separate target dir avoids the outer build lock
    let target = std::env::current_exe()
        .unwrap()
        .ancestors()
        .nth(3)
        .unwrap()
        .join("ffi-smoke");
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let build = Command::new(cargo)
        .args([
            "build",
            "--quiet",
            "-p",
            "dsmyolo-ffi",
            "--lib",
            "--target-dir",
        ])
        .arg(&target)
        .current_dir(&manifest)
        .output()
        .unwrap();
    assert!(
        build.status.success(),
        "{}",
        String::from_utf8_lossy(&build.stderr)
    );
    let lib = target.join("debug/libdsmyolo_ffi.a");
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .expect("C compiler available");
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = Command::new(&exe).output().unwrap();
    assert!(
        run.status.success(),
        "{}{}",
        String::from_utf8_lossy(&run.stdout),
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).contains("smoke ok"));
}
