use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use p2hh_ffi::*;

fn small_config() -> CString {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/small/config.toml");
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = p2hh_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(dir: &Path) -> *mut P2hhConfig {
    let mut config = ptr::null_mut();
    unsafe {
        assert_eq!(p2hh_config_load(small_config().as_ptr(), &mut config), P2hhStatus::Ok);
        let out = CString::new(dir.to_str().unwrap()).unwrap();
        assert_eq!(p2hh_config_set_output(config, out.as_ptr()), P2hhStatus::Ok);
    }
    config
}

#[test]
fn plan_and_evaluate_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let config = load(dir.path());
    unsafe {
        let mut plan = ptr::null_mut();
        assert_eq!(p2hh_plan(config, &mut plan), P2hhStatus::Ok);
        assert!(p2hh_plan_is_optimal(plan));
        let (mut objective, mut nodes) = (0.0, 0usize);
        assert_eq!(
            p2hh_plan_objective(plan, &mut objective, ptr::null_mut(), &mut nodes),
            P2hhStatus::Ok
        );
        assert!(objective.is_finite() && objective > 0.0);
        assert!(nodes >= 1);
        let mut cells = -1.0;
        assert_eq!(
            p2hh_plan_capacity(plan, P2hhCapacity::Cells, &mut cells),
            P2hhStatus::Ok
        );
        assert!(cells >= 0.0 && cells.fract() == 0.0);
        let solution = p2hh_plan_solution_path(plan);
        assert!(!solution.is_null());
        let path = PathBuf::from(CStr::from_ptr(solution).to_str().unwrap());
        assert_eq!(path, dir.path().join("solution.csv"));

        let mut fraction = -1.0;
        assert_eq!(p2hh_evaluate(config, solution, &mut fraction), P2hhStatus::Ok);
        assert!((0.0..=1.0).contains(&fraction));
        assert!(dir.path().join("evaluation.toml").exists());
        p2hh_plan_free(plan);
        p2hh_config_free(config);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = load(dir.path());
    unsafe {
        assert_eq!(p2hh_config_set_mode(config, P2hhMode::Drcc, 0.0), P2hhStatus::Config);
        assert!(last_error().contains("epsilon"));
        // the failed update left the handle usable
        assert_eq!(p2hh_config_set_mode(config, P2hhMode::Gaussian, 0.05), P2hhStatus::Ok);
        assert!(p2hh_last_error().is_null());

        let absent = CString::new(dir.path().join("absent.csv").to_str().unwrap()).unwrap();
        let mut fraction = 0.0;
        assert_eq!(p2hh_evaluate(config, absent.as_ptr(), &mut fraction), P2hhStatus::Load);

        let mut other = ptr::null_mut();
        let missing = CString::new("/nonexistent/config.toml").unwrap();
        assert_eq!(p2hh_config_load(missing.as_ptr(), &mut other), P2hhStatus::Load);
        assert!(other.is_null());
        p2hh_config_free(config);
    }
}

#[test]
fn null_arguments_are_rejected() {
    unsafe {
        let mut config = ptr::null_mut();
        assert_eq!(p2hh_config_load(ptr::null(), &mut config), P2hhStatus::InvalidArgument);
        assert_eq!(p2hh_plan(ptr::null(), ptr::null_mut()), P2hhStatus::InvalidArgument);
        assert_eq!(
            p2hh_safety_factor(P2hhMode::Drcc, 0.05, ptr::null_mut()),
            P2hhStatus::InvalidArgument
        );
        assert!(!p2hh_plan_is_optimal(ptr::null()));
        assert!(p2hh_plan_solution_path(ptr::null()).is_null());
        p2hh_config_free(ptr::null_mut());
        p2hh_plan_free(ptr::null_mut());
    }
}

#[test]
fn safety_factors_and_version() {
    let mut f = 0.0;
    unsafe {
        assert_eq!(p2hh_safety_factor(P2hhMode::Drcc, 0.05, &mut f), P2hhStatus::Ok);
        assert!((f - (0.05f64 / 0.95).sqrt()).abs() < 1e-15);
        assert_eq!(p2hh_safety_factor(P2hhMode::Gaussian, 0.6, &mut f), P2hhStatus::Config);
    }
    let v = unsafe { CStr::from_ptr(p2hh_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/p2hh.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "p2hh_config_load",
        "p2hh_plan",
        "p2hh_evaluate",
        "p2hh_plan_free",
        "p2hh_last_error",
        "P2HH_STATUS_DIMENSION = 6",
        "typedef struct P2hhConfig P2hhConfig",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("use.c");
    std::fs::write(
        &source,
        "#include \"p2hh.h\"\nint main(void) { P2hhConfig *c = 0; return (int)P2HH_STATUS_OK + (c != 0); }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&source)
        .status();
    match status {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(e) => eprintln!("no C compiler available: {e}"),
    }
}
