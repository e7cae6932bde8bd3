use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use tracklabel::data::save_dataset;
use tracklabel::synth::{generate_noisy, NoiseConfig, SynthConfig};
use tracklabel_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        tl_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn write_scene(dir: &Path) -> CString {
    let cfg = SynthConfig {
        n_views: 6,
        n_objects: 3,
        seed: 5,
        noise: NoiseConfig {
            synonym_rate: 0.3,
            ..NoiseConfig::default()
        },
        ..SynthConfig::default()
    };
    let (ds, _) = generate_noisy(&cfg).unwrap();
    let path = dir.join("scene.json");
    save_dataset(&ds, &path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(tl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn dataset_and_consensus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scene(dir.path());
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(tl_dataset_load(path.as_ptr(), &mut ds), TlStatus::Ok);
        assert!(!ds.is_null());
        assert_eq!(tl_dataset_view_count(ds), 6);
        let n = tl_dataset_detection_count(ds);
        assert!(n > 0);

        let mut c = ptr::null_mut();
        assert_eq!(tl_consensus_run(ds, 0.85, &mut c), TlStatus::Ok);
        assert_eq!(tl_consensus_track_count(c), 3);
        assert!(tl_consensus_cluster_count(c) >= 3);

        let mut track = u64::MAX;
        let mut needed = 0usize;
        assert_eq!(
            tl_consensus_track(c, 0, &mut track, ptr::null_mut(), 0, &mut needed),
            TlStatus::BufferTooSmall
        );
        assert!(needed > 1);
        let mut buf = vec![0 as c_char; needed];
        assert_eq!(
            tl_consensus_track(c, 0, &mut track, buf.as_mut_ptr(), buf.len(), &mut needed),
            TlStatus::Ok
        );
        assert_eq!(track, 0);
        let canonical = CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_string();
        assert!(!canonical.is_empty());

        let mut label = vec![0 as c_char; 64];
        for i in 0..n {
            assert_eq!(
                tl_consensus_resolved_label(c, i, label.as_mut_ptr(), label.len(), ptr::null_mut()),
                TlStatus::Ok
            );
        }
        assert_eq!(
            tl_consensus_track(c, 99, &mut track, buf.as_mut_ptr(), buf.len(), ptr::null_mut()),
            TlStatus::OutOfRange
        );
        assert!(last_error().contains("99"));

        tl_consensus_free(c);
        tl_dataset_free(ds);
        tl_consensus_free(ptr::null_mut());
        tl_dataset_free(ptr::null_mut());
    }
}

#[test]
fn load_errors_are_reported() {
    let missing = CString::new("/nonexistent/scene.json").unwrap();
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(tl_dataset_load(missing.as_ptr(), &mut ds), TlStatus::Io);
        assert!(ds.is_null());
        assert!(last_error().contains("nonexistent"));
        assert_eq!(tl_dataset_load(ptr::null(), &mut ds), TlStatus::NullPointer);
        assert_eq!(tl_dataset_detection_count(ptr::null()), 0);
    }
}

#[test]
fn mask_iou_through_the_abi() {
    // 1x4: FTTF vs FFTT
    let a = [1u32, 2, 1];
    let b = [2u32, 2];
    let mut iou = 0.0;
    unsafe {
        assert_eq!(
            tl_mask_iou(1, 4, a.as_ptr(), a.len(), b.as_ptr(), b.len(), &mut iou),
            TlStatus::Ok
        );
        assert!((iou - 1.0 / 3.0).abs() < 1e-15);
        let bad = [3u32];
        assert_eq!(
            tl_mask_iou(1, 4, a.as_ptr(), a.len(), bad.as_ptr(), 1, &mut iou),
            TlStatus::Format
        );
    }
}

#[test]
fn scores_and_losses_through_the_abi() {
    let mut v = 0.0;
    unsafe {
        assert_eq!(tl_visibility_score(40000.0, 10000.0, 100.0, &mut v), TlStatus::Ok);
        assert!((v - 40000.0 * (-0.5f64).exp()).abs() < 1e-9);
        assert_eq!(tl_visibility_score(1.0, 1.0, 0.0, &mut v), TlStatus::InvalidParameter);

        let f_g = [1.0, 0.0];
        let pool = [1.0, 0.0, 0.0, 1.0];
        let pos = [0usize];
        let mut loss = 0.0;
        let mut grad = [0.0; 2];
        assert_eq!(
            tl_contrastive_loss(
                f_g.as_ptr(),
                2,
                pool.as_ptr(),
                2,
                pos.as_ptr(),
                1,
                1.0,
                &mut loss,
                grad.as_mut_ptr()
            ),
            TlStatus::Ok
        );
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        // d/df_g = sum_j pi_j d_j - d_0
        let p0 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((grad[0] - (p0 - 1.0)).abs() < 1e-12);
        assert!((grad[1] - (1.0 - p0)).abs() < 1e-12);

        let empty: [usize; 0] = [];
        assert_eq!(
            tl_contrastive_loss(
                f_g.as_ptr(),
                2,
                pool.as_ptr(),
                2,
                empty.as_ptr(),
                0,
                1.0,
                &mut loss,
                ptr::null_mut()
            ),
            TlStatus::InvalidParameter
        );
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/tracklabel.h");
    assert!(header.exists(), "header not generated");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "tl_dataset_load",
        "tl_consensus_run",
        "tl_mask_iou",
        "tl_contrastive_loss",
        "TL_STATUS_OK",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{}\"\nint main(void) {{ double v; return tl_visibility_score(1.0, 1.0, 1.0, &v) == TL_STATUS_OK ? 0 : 1; }}\n",
            header.display()
        ),
    )
    .unwrap();
    match std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg(&src)
        .status()
    {
        Ok(status) => assert!(status.success(), "header failed to compile"),
        Err(e) => eprintln!("skipping C compile check: {e}"),
    }
}
