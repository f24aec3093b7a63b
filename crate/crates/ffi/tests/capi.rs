use std::ffi::{CStr, CString};
use std::ptr;

use lgat_ffi::*;

const DESK: &str = "variant = eg-mla\nseed = 3\n";

fn last_error() -> String {
    unsafe { CStr::from_ptr(lgat_last_error()) }.to_string_lossy().into_owned()
}

fn model(text: &str) -> *mut LgatModel {
    let c = CString::new(text).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lgat_model_from_config(c.as_ptr(), &mut m) }, LgatStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

#[test]
fn session_steps_match_full_forward() {
    let m = model(DESK);
    let v = unsafe { lgat_model_vocab_size(m) };
    assert_eq!(v, 32);
    let tokens: [u32; 5] = [1, 7, 3, 30, 2];
    let mut full = vec![0.0; tokens.len() * v];
    let st = unsafe { lgat_forward_logits(m, tokens.as_ptr(), tokens.len(), full.as_mut_ptr(), full.len()) };
    assert_eq!(st, LgatStatus::Ok);

    let mut s = ptr::null_mut();
    assert_eq!(unsafe { lgat_session_new(m, &mut s) }, LgatStatus::Ok);
    // The session keeps the weights alive on its own.
    unsafe { lgat_model_free(m) };
    let mut row = vec![0.0; v];
    for (i, &t) in tokens.iter().enumerate() {
        assert_eq!(unsafe { lgat_session_step(s, t, row.as_mut_ptr(), v) }, LgatStatus::Ok);
        assert_eq!(&full[i * v..(i + 1) * v], row.as_slice());
    }
    assert_eq!(unsafe { lgat_session_len(s) }, tokens.len());
    unsafe { lgat_session_free(s) };
}

#[test]
fn greedy_decode_survives_save_and_load() {
    let m = model(DESK);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.lgat").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { lgat_model_save(m, path.as_ptr()) }, LgatStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { lgat_model_load(path.as_ptr(), &mut loaded) }, LgatStatus::Ok);
    assert_eq!(unsafe { lgat_model_param_count(m) }, unsafe { lgat_model_param_count(loaded) });

    let prompt: [u32; 3] = [4, 5, 6];
    let (mut a, mut b) = ([0u32; 10], [0u32; 10]);
    unsafe {
        assert_eq!(lgat_greedy_decode(m, prompt.as_ptr(), 3, 10, a.as_mut_ptr()), LgatStatus::Ok);
        assert_eq!(lgat_greedy_decode(loaded, prompt.as_ptr(), 3, 10, b.as_mut_ptr()), LgatStatus::Ok);
        lgat_model_free(m);
        lgat_model_free(loaded);
    }
    assert_eq!(a, b);
    assert!(a.iter().all(|&t| t < 32));
}

#[test]
fn errors_set_codes_and_messages() {
    let mut m = ptr::null_mut();
    let bad = CString::new("n_layer = 3\nlgz = 2\n").unwrap();
    assert_eq!(unsafe { lgat_model_from_config(bad.as_ptr(), &mut m) }, LgatStatus::Config);
    assert!(last_error().contains("layer group size"), "{}", last_error());
    assert!(m.is_null());

    assert_eq!(unsafe { lgat_model_from_config(ptr::null(), &mut m) }, LgatStatus::NullPointer);

    let missing = CString::new("/nonexistent/lgat/model.bin").unwrap();
    assert_eq!(unsafe { lgat_model_load(missing.as_ptr(), &mut m) }, LgatStatus::Io);

    let good = model(DESK);
    let mut out = [0.0; 32];
    let tok = [99u32];
    assert_eq!(unsafe { lgat_forward_logits(good, tok.as_ptr(), 1, out.as_mut_ptr(), 32) }, LgatStatus::TokenOutOfRange);
    let tok = [1u32];
    assert_eq!(unsafe { lgat_forward_logits(good, tok.as_ptr(), 1, out.as_mut_ptr(), 31) }, LgatStatus::InvalidArgument);
    assert_eq!(unsafe { lgat_forward_logits(good, tok.as_ptr(), 1, out.as_mut_ptr(), 32) }, LgatStatus::Ok);
    assert_eq!(last_error(), "");

    let mut s = ptr::null_mut();
    assert_eq!(unsafe { lgat_session_new(good, &mut s) }, LgatStatus::Ok);
    let max = unsafe { lgat_model_max_seq_len(good) };
    for _ in 0..max {
        assert_eq!(unsafe { lgat_session_step(s, 1, out.as_mut_ptr(), 32) }, LgatStatus::Ok);
    }
    assert_eq!(unsafe { lgat_session_step(s, 1, out.as_mut_ptr(), 32) }, LgatStatus::Overflow);
    unsafe {
        lgat_session_free(s);
        lgat_model_free(good);
        lgat_model_free(ptr::null_mut());
        lgat_string_free(ptr::null_mut());
        assert_eq!(lgat_model_vocab_size(ptr::null()), 0);
    }
}

#[test]
fn audit_csv_round_trips_through_c_string() {
    let text = CString::new(
        "n_layer = 12\nn_head = 12\nhead_dim = 64\nd_nope = 64\nd_rope = 64\nd_v = 64\nd_model = 768\n\
         [a]\nvariant = mha\n[b]\nvariant = eg-mla\nkv_lora_rank = 64\nkv_emb_dim = 256\n",
    )
    .unwrap();
    let mut csv = ptr::null_mut();
    assert_eq!(unsafe { lgat_cache_audit_csv(text.as_ptr(), &mut csv) }, LgatStatus::Ok);
    let s = unsafe { CStr::from_ptr(csv) }.to_str().unwrap().to_owned();
    unsafe { lgat_string_free(csv) };
    let rows: Vec<&str> = s.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("a,mha,12,18432,"));
    assert!(rows[2].starts_with("b,eg-mla,12,1536,"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/lgat.h")).unwrap();
    let src = std::fs::read_to_string(dir.join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from lgat.h");
    }
    // Syntax-check as both C and C++ when a compiler is around.
    for (cc, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = std::process::Command::new(cc)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(dir.join("include/lgat.h"))
            .output()
        else {
            continue;
        };
        assert!(out.status.success(), "{cc}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
