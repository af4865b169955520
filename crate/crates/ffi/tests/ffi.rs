use std::ffi::{c_char, CStr, CString};
use std::ptr;

use mdrive::model::{Model, ModelConfig};
use mdrive::scenes::dataset::{generate_split, write_dataset, Split};
use mdrive::train::corpus_vocab;
use mdrive_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let mut needed = 0;
    let s = unsafe { md_last_error(buf.as_mut_ptr(), buf.len(), &mut needed) };
    assert_eq!(s, MdStatus::MdOk);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: CString,
    data: CString,
    model: Model,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_split(4, Split::Test, 3, 8);
    write_dataset(&samples, &dir.path().join("test")).unwrap();
    let model = Model::new(ModelConfig::tiny(), corpus_vocab(&samples), 2).unwrap();
    let ckpt = dir.path().join("ckpt");
    mdrive::checkpoint::save(&ckpt, &model, &serde_json::json!({}), 0).unwrap();
    Fixture {
        ckpt: cstr(&ckpt),
        data: cstr(&dir.path().join("test")),
        _dir: dir,
        model,
    }
}

#[test]
fn model_round_trip_matches_library() {
    let fx = fixture();
    let mut m: *mut MdModel = ptr::null_mut();
    assert_eq!(unsafe { md_model_load(fx.ckpt.as_ptr(), &mut m) }, MdStatus::MdOk);
    let (mut views, mut size, mut vocab, mut tokens) = (0, 0, 0, 0);
    assert_eq!(
        unsafe { md_model_info(m, &mut views, &mut size, &mut vocab, &mut tokens) },
        MdStatus::MdOk
    );
    assert_eq!((views, size, vocab, tokens), (6, 8, fx.model.vocab.len(), 24));

    let mut ds: *mut MdDataset = ptr::null_mut();
    assert_eq!(unsafe { md_dataset_open(fx.data.as_ptr(), &mut ds) }, MdStatus::MdOk);
    let mut len = 0;
    assert_eq!(unsafe { md_dataset_len(ds, &mut len) }, MdStatus::MdOk);
    assert_eq!(len, 3);

    let mut needed = 0;
    assert_eq!(
        unsafe { md_dataset_views(ds, 0, ptr::null_mut(), 0, &mut needed) },
        MdStatus::MdBufferTooSmall
    );
    assert_eq!(needed, 6 * 8 * 8 * 3);
    let mut pixels = vec![0u8; needed];
    assert_eq!(
        unsafe { md_dataset_views(ds, 0, pixels.as_mut_ptr(), pixels.len(), &mut needed) },
        MdStatus::MdOk
    );
    let mut q = vec![0 as c_char; 256];
    assert_eq!(
        unsafe { md_dataset_text(ds, 0, MdField::MdFieldQuestion, q.as_mut_ptr(), q.len(), &mut needed) },
        MdStatus::MdOk
    );
    let question = unsafe { CStr::from_ptr(q.as_ptr()) }.to_str().unwrap().to_string();

    let mut out = vec![0 as c_char; 1024];
    assert_eq!(
        unsafe { md_model_answer(m, pixels.as_ptr(), 6, 8, q.as_ptr(), out.as_mut_ptr(), out.len(), &mut needed) },
        MdStatus::MdOk
    );
    let got = unsafe { CStr::from_ptr(out.as_ptr()) }.to_str().unwrap().to_string();
    let samples = mdrive::scenes::dataset::read_dataset(std::path::Path::new(fx.data.to_str().unwrap())).unwrap();
    assert_eq!(got, fx.model.answer(&samples[0].views, &question).unwrap());
    assert_eq!(needed, got.len() + 1);

    assert_eq!(
        unsafe { md_model_answer(m, pixels.as_ptr(), 6, 16, q.as_ptr(), out.as_mut_ptr(), out.len(), &mut needed) },
        MdStatus::MdInvalid
    );
    assert!(last_error().contains("16px"));
    assert_eq!(
        unsafe { md_dataset_text(ds, 9, MdField::MdFieldId, out.as_mut_ptr(), out.len(), &mut needed) },
        MdStatus::MdOutOfRange
    );
    unsafe {
        md_dataset_free(ds);
        md_model_free(m);
    }
}

#[test]
fn error_codes() {
    let mut m: *mut MdModel = ptr::null_mut();
    assert_eq!(unsafe { md_model_load(ptr::null(), &mut m) }, MdStatus::MdNullArgument);
    let missing = CString::new("/nonexistent/checkpoint").unwrap();
    assert_eq!(unsafe { md_model_load(missing.as_ptr(), &mut m) }, MdStatus::MdIo);
    assert!(last_error().contains("/nonexistent/checkpoint"));
    assert!(m.is_null());
    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(unsafe { md_model_load(bad.as_ptr() as *const c_char, &mut m) }, MdStatus::MdUtf8);
    unsafe {
        md_model_free(ptr::null_mut());
        md_dataset_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(md_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn scoring_through_the_abi() {
    let preds = [CString::new("the ego vehicle should brake.").unwrap(), CString::new("a b c d").unwrap()];
    let refs = [CString::new("the ego vehicle should brake.").unwrap(), CString::new("a c b d").unwrap()];
    let pp: Vec<*const c_char> = preds.iter().map(|c| c.as_ptr()).collect();
    let rp: Vec<*const c_char> = refs.iter().map(|c| c.as_ptr()).collect();
    let mut s = MdScores::default();
    assert_eq!(unsafe { md_score(pp.as_ptr(), rp.as_ptr(), 2, &mut s) }, MdStatus::MdOk);
    assert_eq!(s.count, 2);
    assert!((s.exact_match - 0.5).abs() < 1e-12);
    assert!(s.cider >= 0.0);
    assert_eq!(unsafe { md_score(pp.as_ptr(), rp.as_ptr(), 1, &mut s) }, MdStatus::MdOk);
    assert_eq!(s.cider, -1.0);
    assert_eq!(unsafe { md_score(pp.as_ptr(), rp.as_ptr(), 0, &mut s) }, MdStatus::MdInvalid);
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/mdrive.h")).unwrap();
    for f in [
        "md_version", "md_last_error", "md_model_load", "md_model_free", "md_model_info", "md_model_answer",
        "md_dataset_open", "md_dataset_free", "md_dataset_len", "md_dataset_text", "md_dataset_views", "md_score",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f}");
    }
    assert!(header.contains("typedef struct MdModel MdModel;"));
    let Ok(cc) = which_cc() else { return };
    let src = std::env::temp_dir().join(format!("mdrive_header_{}.c", std::process::id()));
    std::fs::write(&src, "#include \"mdrive.h\"\nint main(void) { MdScores s; (void)s; return md_version() == 0; }\n").unwrap();
    let status = std::process::Command::new(cc)
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .status()
        .unwrap();
    let _ = std::fs::remove_file(&src);
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
