use std::ffi::{CStr, CString};
use std::ptr;

use sdmpc_ffi::*;

fn last_error() -> String {
    let p = sdmpc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn short_config() -> *mut SdmpcConfig {
    let mut cfg = ptr::null_mut();
    unsafe {
        assert_eq!(sdmpc_config_benchmark(&mut cfg), SdmpcStatus::Ok);
        assert_eq!(sdmpc_config_set_steps(cfg, 3), SdmpcStatus::Ok);
    }
    cfg
}

#[test]
fn benchmark_run_through_handles() {
    unsafe {
        let cfg = short_config();
        let mut run = ptr::null_mut();
        assert_eq!(
            sdmpc_run(cfg, SdmpcMode::Nominal, &mut run),
            SdmpcStatus::Ok
        );
        let (mut steps, mut agents) = (0usize, 0usize);
        assert_eq!(sdmpc_run_step_count(run, &mut steps), SdmpcStatus::Ok);
        assert_eq!(sdmpc_run_agent_count(run, &mut agents), SdmpcStatus::Ok);
        assert_eq!((steps, agents), (3, 4));

        let mut total = 0.0;
        for a in 0..agents {
            let mut j = f64::NAN;
            assert_eq!(sdmpc_run_objective(run, a, &mut j), SdmpcStatus::Ok);
            assert!(j > 0.0);
            total += j;
        }
        let mut global = 0.0;
        assert_eq!(
            sdmpc_run_global_objective(run, &mut global),
            SdmpcStatus::Ok
        );
        assert!((global - total).abs() <= 1e-9 * global);

        let (mut u, mut y) = (f64::NAN, f64::NAN);
        assert_eq!(sdmpc_run_input(run, 0, 0, &mut u), SdmpcStatus::Ok);
        assert_eq!(sdmpc_run_output(run, 0, 0, &mut y), SdmpcStatus::Ok);
        assert!(u.is_finite() && y.is_finite());

        let (mut e, mut flag) = (f64::NAN, -2);
        assert_eq!(
            sdmpc_run_detection(run, 0, 0, &mut e, &mut flag),
            SdmpcStatus::Ok
        );
        assert_eq!(flag, 0);
        assert!(e < 1e-4);

        // nominal runs carry no baseline
        let mut pe = 0.0;
        assert_eq!(sdmpc_run_percent_error(run, 0, &mut pe), SdmpcStatus::Ok);
        assert!(pe.is_nan());

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(sdmpc_run_write_report(run, path.as_ptr()), SdmpcStatus::Ok);
        assert!(dir.path().join("trace.csv").is_file());

        sdmpc_run_free(run);
        sdmpc_config_free(cfg);
    }
}

#[test]
fn attacked_run_reports_percent_error() {
    unsafe {
        let cfg = short_config();
        let mut run = ptr::null_mut();
        assert_eq!(
            sdmpc_run(cfg, SdmpcMode::Corrected, &mut run),
            SdmpcStatus::Ok
        );
        let mut pe = f64::NAN;
        assert_eq!(sdmpc_run_percent_error(run, 1, &mut pe), SdmpcStatus::Ok);
        assert!(pe.is_finite());
        sdmpc_run_free(run);
        sdmpc_config_free(cfg);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(
            sdmpc_config_benchmark(ptr::null_mut()),
            SdmpcStatus::NullPointer
        );
        assert!(last_error().contains("NULL"));

        let text = CString::new("budget = -1.0\n").unwrap();
        assert_eq!(
            sdmpc_config_parse(text.as_ptr(), &mut cfg),
            SdmpcStatus::InvalidConfig
        );
        assert!(cfg.is_null());
        assert!(!last_error().is_empty());

        let missing = CString::new("/nonexistent/benchmark.toml").unwrap();
        assert_eq!(
            sdmpc_config_load(missing.as_ptr(), &mut cfg),
            SdmpcStatus::IoFailure
        );

        let bad_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(
            sdmpc_config_parse(bad_utf8.as_ptr().cast(), &mut cfg),
            SdmpcStatus::InvalidUtf8
        );

        let cfg = short_config();
        assert_eq!(sdmpc_config_set_defense(cfg, false), SdmpcStatus::Ok);
        let mut run = ptr::null_mut();
        assert_eq!(
            sdmpc_run(cfg, SdmpcMode::Corrected, &mut run),
            SdmpcStatus::InvalidConfig
        );
        assert!(run.is_null());
        assert_eq!(
            sdmpc_run(cfg, SdmpcMode::Selfish, &mut run),
            SdmpcStatus::Ok
        );
        let mut x = 0.0;
        assert_eq!(sdmpc_run_input(run, 99, 0, &mut x), SdmpcStatus::OutOfRange);
        let (mut e, mut flag) = (0.0, 0);
        assert_eq!(
            sdmpc_run_detection(run, 0, 0, &mut e, &mut flag),
            SdmpcStatus::Ok
        );
        assert_eq!(flag, -1);
        assert!(e.is_nan());
        sdmpc_run_free(run);
        sdmpc_config_free(cfg);

        sdmpc_config_free(ptr::null_mut());
        sdmpc_run_free(ptr::null_mut());
    }
}

#[test]
fn status_strings_are_static() {
    for s in [SdmpcStatus::Ok, SdmpcStatus::Panic, SdmpcStatus::OutOfRange] {
        let text = unsafe { CStr::from_ptr(sdmpc_status_str(s)) };
        assert!(!text.to_bytes().is_empty());
    }
}
