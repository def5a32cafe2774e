use std::ffi::{c_char, CStr, CString};
use std::ptr;

use slc_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take_string(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    slc_string_free(p);
    s
}

fn last_error() -> String {
    let p = slc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn registry_with(concepts: &[(&str, [f64; 2])]) -> *mut SlcRegistry {
    let r = slc_registry_new();
    for (id, emb) in concepts {
        let status = slc_registry_register(r, cstr(id).as_ptr(), cstr("a thing").as_ptr(), emb.as_ptr(), 1, 2);
        assert_eq!(status, SlcStatus::Ok);
    }
    r
}

#[test]
fn register_and_scenario_embedding() {
    unsafe {
        let r = registry_with(&[("<a>", [1.0, 0.0]), ("<b>", [0.0, 1.0])]);
        assert_eq!(slc_registry_len(r), 2);
        let mut buf = [0.0f64; 2];
        let mut len = 0usize;
        assert_eq!(slc_registry_scenario_embedding(r, buf.as_mut_ptr(), 2, &mut len), SlcStatus::Ok);
        assert_eq!(len, 2);
        assert!((buf[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!((buf[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!(slc_last_error_message().is_null());

        assert_eq!(slc_registry_scenario_embedding(r, buf.as_mut_ptr(), 1, &mut len), SlcStatus::BufferTooSmall);
        assert_eq!(len, 2);
        slc_registry_free(r);
    }
}

#[test]
fn registry_errors_map_to_codes() {
    unsafe {
        let r = registry_with(&[("<a>", [1.0, 0.0])]);
        let e = [1.0, 0.0];
        let desc = cstr("x");
        assert_eq!(slc_registry_register(r, cstr("<a>").as_ptr(), desc.as_ptr(), e.as_ptr(), 1, 2), SlcStatus::DuplicateId);
        assert!(last_error().contains("<a>"));
        assert_eq!(slc_registry_register(r, cstr("bo").as_ptr(), desc.as_ptr(), e.as_ptr(), 1, 2), SlcStatus::MalformedId);
        let e3 = [1.0, 0.0, 0.0];
        assert_eq!(
            slc_registry_register(r, cstr("<c>").as_ptr(), desc.as_ptr(), e3.as_ptr(), 1, 3),
            SlcStatus::DimensionMismatch
        );
        assert_eq!(slc_registry_register(ptr::null_mut(), desc.as_ptr(), desc.as_ptr(), e.as_ptr(), 1, 2), SlcStatus::NullPointer);
        let bad = [0xffu8, 0];
        assert_eq!(
            slc_registry_register(r, bad.as_ptr().cast(), desc.as_ptr(), e.as_ptr(), 1, 2),
            SlcStatus::InvalidUtf8
        );
        assert_eq!(slc_registry_len(r), 1);
        slc_registry_free(r);
        slc_registry_free(ptr::null_mut());
    }
}

#[test]
fn build_select_and_round_trip() {
    unsafe {
        let r = registry_with(&[("<a>", [1.0, 0.0]), ("<b>", [0.0, 1.0]), ("<c>", [0.9, 0.1])]);
        let mut d = ptr::null_mut();
        let refs = cstr(r#"["adapter-x", "adapter-y"]"#);
        assert_eq!(slc_dictionary_build(r, 2, 3, refs.as_ptr(), &mut d), SlcStatus::Ok);

        let q = [0.0, 1.0];
        let mut out = ptr::null_mut();
        assert_eq!(slc_dictionary_select(d, q.as_ptr(), 2, 1, &mut out), SlcStatus::Ok);
        let json: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
        assert_eq!(json["chosen"][0]["score"], 1.0);
        assert_eq!(json["top_k"], 1);

        let mut idx = usize::MAX;
        assert_eq!(slc_dictionary_select_index(d, q.as_ptr(), 2, &mut idx), SlcStatus::Ok);
        assert_eq!(json["chosen"][0]["index"], idx);

        let dir = tempfile::tempdir().unwrap();
        let path = cstr(dir.path().join("d.json").to_str().unwrap());
        assert_eq!(slc_dictionary_save(d, path.as_ptr()), SlcStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(slc_dictionary_load(path.as_ptr(), &mut loaded), SlcStatus::Ok);
        let mut idx2 = usize::MAX;
        assert_eq!(slc_dictionary_select_index(loaded, q.as_ptr(), 2, &mut idx2), SlcStatus::Ok);
        assert_eq!(idx, idx2);

        let wrong = [1.0, 0.0, 0.0];
        assert_eq!(slc_dictionary_select(d, wrong.as_ptr(), 3, 1, &mut out), SlcStatus::DimensionMismatch);
        assert_eq!(slc_dictionary_build(r, 5, 0, ptr::null(), &mut d), SlcStatus::InvalidArgument);

        slc_dictionary_free(d);
        slc_dictionary_free(loaded);
        slc_registry_free(r);
    }
}

#[test]
fn registry_save_load() {
    unsafe {
        let r = registry_with(&[("<a>", [3.0, 4.0])]);
        let dir = tempfile::tempdir().unwrap();
        let path = cstr(dir.path().join("r.json").to_str().unwrap());
        assert_eq!(slc_registry_save(r, path.as_ptr()), SlcStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(slc_registry_load(path.as_ptr(), &mut loaded), SlcStatus::Ok);
        assert_eq!(slc_registry_len(loaded), 1);
        slc_registry_free(loaded);
        slc_registry_free(r);
    }
}

#[test]
fn parse_helpers() {
    unsafe {
        let mut out = ptr::null_mut();
        let raw = cstr("```json\n{\"<bo>\": {\"present\": true, \"location-absolute\": \"center\"}}\n```");
        let ids = cstr(r#"["<bo>", "<lina>"]"#);
        assert_eq!(slc_parse_cue_report(raw.as_ptr(), ids.as_ptr(), &mut out), SlcStatus::Ok);
        let report: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
        assert_eq!(report["cues"]["<bo>"]["loc_abs"], "center");
        assert_eq!(report["cues"]["<lina>"]["present"], false);

        assert_eq!(slc_parse_cue_report(cstr("no json").as_ptr(), ids.as_ptr(), &mut out), SlcStatus::Parse);

        let mut answers = [9u8; 3];
        assert_eq!(slc_parse_yes_no(cstr("No, yes").as_ptr(), 3, answers.as_mut_ptr()), SlcStatus::Ok);
        assert_eq!(answers, [0, 1, 1]);
    }
}

#[test]
fn pipeline_from_scripted_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("slc.toml");
    std::fs::write(
        &config,
        r#"
[small_model]
kind = "scripted"
default_reply = '{"<a>": {"present": true, "location-absolute": "center", "location-relative": "on the table"}}'

[large_model]
kind = "scripted"
default_reply = "yes"
[[large_model.rules]]
contains = ["Q1."]
reply = "no no"
[[large_model.rules]]
contains = ["<a>: {\"present\": false}"]
reply = "no"

[embedder]
kind = "mock"
dimension = 2
"#,
    )
    .unwrap();
    unsafe {
        let r = registry_with(&[("<a>", [1.0, 0.0]), ("<b>", [0.0, 1.0])]);
        let mut d = ptr::null_mut();
        assert_eq!(slc_dictionary_build(r, 2, 0, ptr::null(), &mut d), SlcStatus::Ok);
        let mut p = ptr::null_mut();
        let path = cstr(config.to_str().unwrap());
        assert_eq!(slc_pipeline_from_config(path.as_ptr(), &mut p), SlcStatus::Ok);
        let mut out = ptr::null_mut();
        let status = slc_pipeline_ask(
            p,
            r,
            d,
            cstr("scene.jpg").as_ptr(),
            cstr("Is <a> here?").as_ptr(),
            1,
            true,
            true,
            &mut out,
        );
        assert_eq!(status, SlcStatus::Ok, "{}", last_error());
        let turn: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
        assert_eq!(turn["answer"], "no");
        assert_eq!(turn["verified_cues"]["<a>"]["present"], false);
        assert_eq!(turn["audit"]["<a>"]["case"], "revoked");

        let empty_q = slc_pipeline_ask(p, r, d, cstr("scene.jpg").as_ptr(), cstr(" ").as_ptr(), 1, true, true, &mut out);
        assert_eq!(empty_q, SlcStatus::InvalidArgument);
        slc_pipeline_free(p);
        slc_dictionary_free(d);
        slc_registry_free(r);
    }
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(slc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/slc.h")).unwrap();
    let source = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(status) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    if !status.status.success() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("check.c");
    std::fs::write(
        &src,
        "#include \"slc.h\"\nint main(void) { SlcRegistry *r = slc_registry_new(); slc_registry_free(r); return SLC_STATUS_OK; }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
