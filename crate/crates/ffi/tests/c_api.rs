use std::ffi::{c_char, CStr, CString};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use xlprompt_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = xlp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_string_lossy().into_owned();
    xlp_string_free(p);
    s
}

fn core_fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(rel)
}

#[test]
fn cosine_and_error_reporting() {
    let (a, b) = ([3.0f32, 4.0], [4.0f32, 3.0]);
    let mut value = 0.0;
    unsafe {
        assert_eq!(xlp_cosine_similarity(a.as_ptr(), b.as_ptr(), 2, &mut value), XlpStatus::Ok);
        assert!((value - 0.96).abs() < 1e-6);
        assert!(xlp_last_error().is_null());
        assert_eq!(xlp_cosine_similarity(ptr::null(), b.as_ptr(), 2, &mut value), XlpStatus::NullArgument);
        assert!(last_error().contains("`a`"));
        assert_eq!(xlp_cosine_similarity(a.as_ptr(), b.as_ptr(), 2, ptr::null_mut()), XlpStatus::NullArgument);
    }
}

#[test]
fn hashing_embeddings_are_unit_and_deterministic() {
    let mut x = [0f32; 64];
    let mut y = [0f32; 64];
    let text = cstr("the package arrived broken");
    unsafe {
        assert_eq!(xlp_hashing_embed(text.as_ptr(), 64, x.as_mut_ptr()), XlpStatus::Ok);
        assert_eq!(xlp_hashing_embed(text.as_ptr(), 64, y.as_mut_ptr()), XlpStatus::Ok);
        assert_eq!(xlp_hashing_embed(text.as_ptr(), 0, y.as_mut_ptr()), XlpStatus::InvalidArgument);
    }
    assert_eq!(x, y);
    let norm: f64 = x.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
}

#[test]
fn macro_f1_over_c_strings() {
    let owned: Vec<CString> = ["pos", "neg", "neg", "neg", "pos", "pos", "pos", "pos", "neg", "pos"]
        .iter()
        .map(|s| cstr(s))
        .collect();
    let ptrs: Vec<*const c_char> = owned.iter().map(|s| s.as_ptr()).collect();
    let (preds, golds) = ptrs.split_at(5);
    let labels = [cstr("neg"), cstr("pos")];
    let label_ptrs: Vec<*const c_char> = labels.iter().map(|s| s.as_ptr()).collect();
    let mut value = -1.0;
    unsafe {
        let status = xlp_macro_f1(preds.as_ptr(), golds.as_ptr(), 5, label_ptrs.as_ptr(), 2, &mut value);
        assert_eq!(status, XlpStatus::Ok);
        // golds: pos pos pos neg pos; preds: pos neg neg neg pos.
        // F1(pos) = 2*1*0.5/1.5 = 2/3, F1(neg) = 2*(1/3)*1/(4/3) = 1/2.
        assert!((value - 7.0 / 12.0).abs() < 1e-12);
        let unknown = [cstr("maybe")];
        let unknown_ptrs = [unknown[0].as_ptr()];
        let status = xlp_macro_f1(unknown_ptrs.as_ptr(), golds.as_ptr(), 1, label_ptrs.as_ptr(), 2, &mut value);
        assert_eq!(status, XlpStatus::InvalidArgument);
    }
}

#[test]
fn index_handles_round_trip_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let path = cstr(tmp.path().join("x.idx").to_str().unwrap());
    let ids = [10u64, 20, 30];
    let rows = [1.0f32, 0.0, 0.0, 1.0, 0.6, 0.8];
    let query = [1.0f32, 0.0];
    unsafe {
        let mut index = ptr::null_mut();
        assert_eq!(xlp_index_from_vectors(ptr::null(), ids.as_ptr(), rows.as_ptr(), 3, 2, &mut index), XlpStatus::Ok);
        assert_eq!(xlp_index_save(index, path.as_ptr()), XlpStatus::Ok);
        xlp_index_free(index);

        let mut loaded = ptr::null_mut();
        assert_eq!(xlp_index_load(path.as_ptr(), &mut loaded), XlpStatus::Ok);
        assert_eq!((xlp_index_len(loaded), xlp_index_dim(loaded)), (3, 2));
        let (mut out_ids, mut out_scores) = ([0u64; 3], [0f64; 3]);
        let status = xlp_index_bottom_k(loaded, query.as_ptr(), 2, 3, out_ids.as_mut_ptr(), out_scores.as_mut_ptr());
        assert_eq!(status, XlpStatus::Ok);
        assert_eq!(out_ids, [20, 30, 10]);
        assert!((out_scores[1] - 0.6).abs() < 1e-6);
        let status = xlp_index_top_k(loaded, query.as_ptr(), 3, 1, out_ids.as_mut_ptr(), out_scores.as_mut_ptr());
        assert_eq!(status, XlpStatus::DimensionMismatch);
        xlp_index_free(loaded);
        xlp_index_free(ptr::null_mut());

        let missing = cstr(tmp.path().join("none.idx").to_str().unwrap());
        let mut none = ptr::null_mut();
        assert_eq!(xlp_index_load(missing.as_ptr(), &mut none), XlpStatus::Io);
        assert!(none.is_null());
        assert_eq!(xlp_index_len(none), 0);
    }
}

fn mixed_config(dir: &Path) -> PathBuf {
    let config = format!(
        "dataset = \"{}\"\nstrategies = [\"random\", \"x_insta\"]\nsources = [\"en\"]\ntargets = [\"es\"]\nk = 2\nseeds = [1, 2]\n\n[embedder]\nkind = \"precomputed\"\npath = \"{}\"\n",
        core_fixture("marc_mixed/marc.toml").display(),
        core_fixture("marc_mixed/vectors.jsonl").display(),
    );
    let path = dir.join("engine.toml");
    fs::write(&path, config).unwrap();
    path
}

#[test]
fn engine_shows_prompts_and_runs_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let config = cstr(mixed_config(tmp.path()).to_str().unwrap());
    let golden = fs::read_to_string(core_fixture("goldens/mixed_x_insta.txt")).unwrap();
    unsafe {
        let mut engine = ptr::null_mut();
        assert_eq!(xlp_engine_open(config.as_ptr(), ptr::null(), 0, &mut engine), XlpStatus::Ok);

        let mut json = ptr::null_mut();
        let strategy = cstr("x_insta");
        assert_eq!(xlp_engine_show_prompt(engine, strategy.as_ptr(), 0, ptr::null(), 98, &mut json), XlpStatus::Ok);
        let plan: serde_json::Value = serde_json::from_str(&take(json)).unwrap();
        assert_eq!(plan["final_text"].as_str().unwrap(), golden);

        let bogus = cstr("telepathy");
        let status = xlp_engine_show_prompt(engine, bogus.as_ptr(), 0, ptr::null(), 98, &mut json);
        assert_eq!(status, XlpStatus::InvalidArgument);
        assert!(last_error().contains("telepathy"));
        let status = xlp_engine_show_prompt(engine, strategy.as_ptr(), 99, ptr::null(), 98, &mut json);
        assert_eq!(status, XlpStatus::InvalidArgument);

        let out = tmp.path().join("out");
        let out_c = cstr(out.to_str().unwrap());
        assert_eq!(xlp_engine_run(engine, out_c.as_ptr(), &mut json), XlpStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(&take(json)).unwrap();
        assert_eq!(report["cells"].as_array().unwrap().len(), 2);
        assert!(out.join("report.json").exists());
        xlp_engine_free(engine);
    }
}

#[test]
fn engine_open_reports_config_and_plan_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let config = cstr(mixed_config(tmp.path()).to_str().unwrap());
    unsafe {
        let mut engine = ptr::null_mut();
        let bad = [cstr("nonsense_key=1")];
        let overrides = [bad[0].as_ptr()];
        assert_eq!(xlp_engine_open(config.as_ptr(), overrides.as_ptr(), 1, &mut engine), XlpStatus::Config);
        assert!(engine.is_null());

        let auto = [cstr("strategies=[\"auto_aligner\"]")];
        let overrides = [auto[0].as_ptr()];
        assert_eq!(xlp_engine_open(config.as_ptr(), overrides.as_ptr(), 1, &mut engine), XlpStatus::Ok);
        let mut json = ptr::null_mut();
        assert_eq!(xlp_engine_run(engine, ptr::null(), &mut json), XlpStatus::Plan);
        assert!(last_error().contains("auto_aligner"));
        assert!(json.is_null());
        xlp_engine_free(engine);
    }
}

/// Compiles a C program against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(header_dir.join("xlprompt.h").exists());
    // Test binaries live in <target>/<profile>/deps; the library one level up.
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libxlprompt_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let source = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/c/smoke.c");
    let compiler = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(&compiler)
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&header_dir)
        .arg(&source)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let output = Command::new(&bin).output().unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(String::from_utf8_lossy(&output.stdout).starts_with("xlprompt 0.1.0 ok"));
}
