use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use codchain::corpus::Vocabulary;
use codchain::model::{EncoderKind, ModelConfig, Preset, Seq2Seq};
use codchain::search::{beam_decode, Conditioned};
use codchain_ffi::*;

const TABLE: &str = "\
D460 C000 C97
D460 D460
D460 Y400 Y599
D461 C000 C97
D461 D461
D461 Y400 Y599
D461 Y880
";

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = cc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn graph() -> *mut CcGraph {
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { cc_graph_parse(cstr(TABLE).as_ptr(), &mut g) }, CcStatus::Ok);
    g
}

fn chain_validity(g: *const CcGraph, chain: &[&str]) -> (CcStatus, bool, isize) {
    let owned: Vec<CString> = chain.iter().map(|c| cstr(c)).collect();
    let ptrs: Vec<*const c_char> = owned.iter().map(|c| c.as_ptr()).collect();
    let (mut valid, mut bad) = (false, 99);
    let st = unsafe { cc_graph_chain_is_valid(g, ptrs.as_ptr(), ptrs.len(), &mut valid, &mut bad) };
    (st, valid, bad)
}

#[test]
fn graph_queries() {
    let g = graph();
    let mut n = 0;
    assert_eq!(unsafe { cc_graph_rule_count(g, &mut n) }, CcStatus::Ok);
    assert_eq!(n, 7);
    let mut ok = false;
    for (cause, effect, want) in [("D460", "D460", true), ("C341", "D460", true), ("Z999", "D460", false)] {
        assert_eq!(unsafe { cc_graph_is_valid_pair(g, cstr(cause).as_ptr(), cstr(effect).as_ptr(), &mut ok) }, CcStatus::Ok);
        assert_eq!(ok, want, "{cause} -> {effect}");
    }
    assert_eq!(chain_validity(g, &["D460", "C000"]), (CcStatus::Ok, false, 0));
    assert_eq!(chain_validity(g, &["C000", "D460"]), (CcStatus::Ok, true, -1));
    assert_eq!(chain_validity(g, &[]).0, CcStatus::InvalidArgument);
    unsafe { cc_graph_free(g) };
    unsafe { cc_graph_free(ptr::null_mut()) };
}

#[test]
fn load_errors_carry_messages() {
    let mut g = ptr::null_mut();
    let st = unsafe { cc_graph_load(cstr("/definitely/missing.txt").as_ptr(), &mut g) };
    assert_eq!(st, CcStatus::Io);
    assert!(g.is_null());
    assert!(last_error().contains("missing.txt"));
    assert_eq!(unsafe { cc_graph_parse(cstr("D460 C000 C97 C98\n").as_ptr(), &mut g) }, CcStatus::Parse);
    assert!(last_error().contains(":1:"));
    let bad = [0xffu8, 0];
    assert_eq!(unsafe { cc_graph_parse(bad.as_ptr().cast(), &mut g) }, CcStatus::InvalidUtf8);
}

#[test]
fn normalize_and_strings() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { cc_normalize_code(cstr(" i50.0 ").as_ptr(), CcSystem::Icd10 as u32, &mut out) }, CcStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(out) }.to_str().unwrap(), "I500");
    unsafe { cc_string_free(out) };
    assert_eq!(unsafe { cc_normalize_code(cstr("I50").as_ptr(), 42, &mut out) }, CcStatus::InvalidArgument);
    assert_eq!(unsafe { cc_normalize_code(cstr("").as_ptr(), CcSystem::Icd9 as u32, &mut out) }, CcStatus::Parse);
    let v = unsafe { CStr::from_ptr(cc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn bleu_matches_library() {
    let cands = [cstr("A B C"), cstr("A")];
    let refs = [cstr("A B D"), cstr("A")];
    let cp: Vec<_> = cands.iter().map(|c| c.as_ptr()).collect();
    let rp: Vec<_> = refs.iter().map(|c| c.as_ptr()).collect();
    let mut b = CcBleu::default();
    assert_eq!(unsafe { cc_corpus_bleu(cp.as_ptr(), rp.as_ptr(), 2, &mut b) }, CcStatus::Ok);
    let split = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let lib = codchain::eval::corpus_bleu(&[(split("A B C"), split("A B D")), (split("A"), split("A"))]).unwrap();
    assert_eq!((b.p1, b.bp, b.score, b.has_p2), (lib.p1, lib.bp, lib.score, true));
    assert_eq!(b.p2, lib.p2.unwrap());
    assert_eq!(unsafe { cc_corpus_bleu(cp.as_ptr(), rp.as_ptr(), 0, &mut b) }, CcStatus::Parse);
}

#[test]
fn translate_matches_library() {
    let mut cfg = ModelConfig::preset(EncoderKind::Lstm, Preset::Desk);
    cfg.seed = 4;
    let src = Vocabulary::from_tokens(["4280", "1890", "25000"].map(String::from));
    let tgt = Vocabulary::from_tokens(["C000", "D460", "I500", "Y880"].map(String::from));
    let model = Seq2Seq::new(cfg, src, tgt).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { cc_model_load(cstr(path.to_str().unwrap()).as_ptr(), &mut m) }, CcStatus::Ok);
    let g = graph();
    let codes = [cstr("428.0"), cstr("189.0")];
    let cp: Vec<_> = codes.iter().map(|c| c.as_ptr()).collect();
    let mut json = ptr::null_mut();
    let st = unsafe { cc_model_translate(m, g, cp.as_ptr(), 2, CcSystem::Icd9 as u32, 3, 5, true, &mut json) };
    assert_eq!(st, CcStatus::Ok, "{}", last_error());
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_string();
    unsafe { cc_string_free(json) };
    let got: serde_json::Value = serde_json::from_str(&text).unwrap();

    let ids = model.src_vocab.encode_all(&["4280", "1890"]);
    let lib_graph = codchain::acme::CausalGraph::parse(TABLE, Path::new("t")).unwrap();
    let mask = lib_graph.build_constraint_mask(&model.tgt_vocab);
    let want = beam_decode(&Conditioned::new(&model, &ids).unwrap(), 3, 5, Some(&mask));
    let got = got.as_array().unwrap();
    assert_eq!(got.len(), want.len());
    for (g_h, w) in got.iter().zip(&want) {
        let chain = model.tgt_vocab.decode_codes(&w.tokens);
        assert_eq!(g_h["chain"], serde_json::json!(chain));
        assert_eq!(g_h["log_prob"].as_f64().unwrap(), w.log_prob);
        assert_eq!(g_h["edge_valid"], serde_json::json!(lib_graph.edge_validity(&chain)));
        assert!(lib_graph.chain_is_valid(&chain).valid);
    }

    let st = unsafe { cc_model_translate(m, ptr::null(), cp.as_ptr(), 2, CcSystem::Icd9 as u32, 3, 5, true, &mut json) };
    assert_eq!(st, CcStatus::InvalidArgument);
    let st = unsafe { cc_model_translate(m, ptr::null(), cp.as_ptr(), 0, CcSystem::Icd9 as u32, 3, 5, false, &mut json) };
    assert_eq!(st, CcStatus::InvalidArgument);
    unsafe { cc_model_free(m) };
    unsafe { cc_graph_free(g) };
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/codchain.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["cc_graph_load", "cc_graph_chain_is_valid", "cc_model_translate", "cc_corpus_bleu", "cc_last_error", "CC_STATUS_PANIC", "typedef struct CcGraph CcGraph"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let compiler = ["cc", "gcc", "clang"].into_iter().find(|c| Command::new(c).arg("--version").output().is_ok());
    let Some(compiler) = compiler else {
        eprintln!("no C compiler found; skipping compile check");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"codchain.h\"\nint main(void) {\n  CcGraph *g = NULL;\n  CcStatus s = cc_graph_parse(\"D460 D460\", &g);\n  cc_graph_free(g);\n  return s == CC_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let out = Command::new(compiler)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
