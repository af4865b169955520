//! C ABI for loading checkpoints, answering questions, reading datasets
//! and scoring predictions.
//!
//! Every function returns an [`MdStatus`]. Handles are opaque and must be
//! released with their `*_free` function. Strings are NUL-terminated UTF-8.
//! Text results are copied into caller buffers: on `MD_BUFFER_TOO_SMALL`
//! the required size (including the NUL) is still written to `*needed`.
//! The message of the last failure on the calling thread is available
//! from [`md_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mdrive::image::RgbImage;
use mdrive::metrics::{self, EvalPair, MetricsError};
use mdrive::model::Model;
use mdrive::scenes::dataset::{read_dataset, DatasetError};
use mdrive::scenes::SceneSample;
use mdrive::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdStatus {
    MdOk = 0,
    MdNullArgument = 1,
    MdInvalid = 2,
    MdNumerical = 3,
    MdIo = 4,
    MdUtf8 = 5,
    MdBufferTooSmall = 6,
    MdOutOfRange = 7,
    MdPanic = 8,
}

/// Loaded model with its vocabulary.
pub struct MdModel {
    model: Model,
}

/// Samples of one dataset split.
pub struct MdDataset {
    samples: Vec<SceneSample>,
}

/// Corpus scores. BLEU-4, METEOR, ROUGE-L and exact match lie in `[0,1]`;
/// `cider` is negative when fewer than two pairs were scored.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MdScores {
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub exact_match: f64,
    pub count: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(MdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::Dataset(DatasetError::Io { .. }) | Error::Metrics(MetricsError::Io(_)) => MdStatus::MdIo,
            Error::Numerical(_) => MdStatus::MdNumerical,
            _ => MdStatus::MdInvalid,
        };
        Fail(status, error_chain(&e))
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut s = e.to_string();
    let mut src = e.source();
    while let Some(c) = src {
        s.push_str(": ");
        s.push_str(&c.to_string());
        src = c.source();
    }
    s
}

/// Runs `f`, recording failures and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdStatus::MdOk,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MdStatus::MdPanic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MdStatus::MdNullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MdStatus::MdUtf8, format!("{what} is not valid UTF-8")))
}

/// Copies `s` plus a NUL into `buf`.
unsafe fn copy_out(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Fail> {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || cap < n {
        return Err(Fail(
            MdStatus::MdBufferTooSmall,
            format!("buffer of {cap} bytes, {n} needed"),
        ));
    }
    ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Static version string.
#[no_mangle]
pub extern "C" fn md_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message of this thread into `buf`.
///
/// # Safety
/// `buf` must point to `cap` writable bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn md_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> MdStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match copy_out(&msg, buf, cap, needed) {
        Ok(()) => MdStatus::MdOk,
        Err(Fail(s, _)) => s,
    }
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn md_model_load(dir: *const c_char, out: *mut *mut MdModel) -> MdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = str_arg(dir, "dir")?;
        let (model, _) = mdrive::checkpoint::load(Path::new(dir))?;
        *out = Box::into_raw(Box::new(MdModel { model }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`md_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn md_model_free(model: *mut MdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of views, pixels per view side, vocabulary size and visual
/// tokens per sample. Any output pointer may be null.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn md_model_info(
    model: *const MdModel,
    views: *mut usize,
    image_size: *mut usize,
    vocab_size: *mut usize,
    visual_tokens: *mut usize,
) -> MdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        for (p, v) in [
            (views, m.cfg.encoder.num_views()),
            (image_size, m.cfg.encoder.input_size),
            (vocab_size, m.vocab.len()),
            (visual_tokens, m.cfg.visual_tokens()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Greedy answer for `views` images of `size×size` interleaved RGB bytes,
/// laid out one after another in canonical camera order.
///
/// # Safety
/// `pixels` must hold `views·size·size·3` bytes; `buf` must point to
/// `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn md_model_answer(
    model: *const MdModel,
    pixels: *const u8,
    views: usize,
    size: usize,
    question: *const c_char,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> MdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let question = str_arg(question, "question")?;
        if size != m.cfg.encoder.input_size {
            return Err(Fail(
                MdStatus::MdInvalid,
                format!("views are {size}px, the model expects {}px", m.cfg.encoder.input_size),
            ));
        }
        let per = size * size * 3;
        let data = std::slice::from_raw_parts(pixels, views * per);
        let images: Vec<RgbImage> = data
            .chunks_exact(per.max(1))
            .map(|c| RgbImage {
                width: size,
                height: size,
                pixels: c.to_vec(),
            })
            .collect();
        let answer = m.answer(&images, question)?;
        copy_out(&answer, buf, cap, needed)
    })
}

/// Opens a dataset split directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn md_dataset_open(dir: *const c_char, out: *mut *mut MdDataset) -> MdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = str_arg(dir, "dir")?;
        let samples = read_dataset(Path::new(dir)).map_err(Error::from)?;
        *out = Box::into_raw(Box::new(MdDataset { samples }));
        Ok(())
    })
}

/// Releases a dataset; null is ignored.
///
/// # Safety
/// `ds` must come from [`md_dataset_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn md_dataset_free(ds: *mut MdDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live handle and `len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn md_dataset_len(ds: *const MdDataset, len: *mut usize) -> MdStatus {
    guard(|| {
        let d = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if len.is_null() {
            return Err(null("len"));
        }
        *len = d.samples.len();
        Ok(())
    })
}

unsafe fn sample<'a>(ds: *const MdDataset, index: usize) -> Result<&'a SceneSample, Fail> {
    let d = ds.as_ref().ok_or_else(|| null("dataset"))?;
    d.samples.get(index).ok_or_else(|| {
        Fail(
            MdStatus::MdOutOfRange,
            format!("sample {index} of {}", d.samples.len()),
        )
    })
}

/// Which text field of a sample to copy.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MdField {
    MdFieldId = 0,
    MdFieldQuestion = 1,
    MdFieldAnswer = 2,
    MdFieldCategory = 3,
}

/// Copies one text field of sample `index`.
///
/// # Safety
/// `ds` must be a live handle; `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn md_dataset_text(
    ds: *const MdDataset,
    index: usize,
    field: MdField,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> MdStatus {
    guard(|| {
        let s = sample(ds, index)?;
        let text = match field {
            MdField::MdFieldId => s.id.as_str(),
            MdField::MdFieldQuestion => s.question.as_str(),
            MdField::MdFieldAnswer => s.answer.as_str(),
            MdField::MdFieldCategory => s.category.as_str(),
        };
        copy_out(text, buf, cap, needed)
    })
}

/// Copies the views of sample `index` in canonical camera order, each
/// `size×size` interleaved RGB. `needed` receives the byte count.
///
/// # Safety
/// `ds` must be a live handle; `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn md_dataset_views(
    ds: *const MdDataset,
    index: usize,
    buf: *mut u8,
    cap: usize,
    needed: *mut usize,
) -> MdStatus {
    guard(|| {
        let s = sample(ds, index)?;
        let n: usize = s.views.iter().map(|v| v.pixels.len()).sum();
        if !needed.is_null() {
            *needed = n;
        }
        if buf.is_null() || cap < n {
            return Err(Fail(
                MdStatus::MdBufferTooSmall,
                format!("buffer of {cap} bytes, {n} needed"),
            ));
        }
        let mut off = 0;
        for v in &s.views {
            ptr::copy_nonoverlapping(v.pixels.as_ptr(), buf.add(off), v.pixels.len());
            off += v.pixels.len();
        }
        Ok(())
    })
}

/// Scores `n` predictions, each against a single reference.
///
/// # Safety
/// `predictions` and `references` must each hold `n` valid strings;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn md_score(
    predictions: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut MdScores,
) -> MdStatus {
    guard(|| {
        if predictions.is_null() || references.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            let p = str_arg(*predictions.add(i), "prediction")?;
            let r = str_arg(*references.add(i), "reference")?;
            pairs.push(EvalPair::from_text(p, &[r], None));
        }
        let s = metrics::score(&pairs).map_err(Error::from)?;
        *out = MdScores {
            bleu4: s.bleu4,
            meteor: s.meteor,
            rouge_l: s.rouge_l,
            cider: s.cider.unwrap_or(-1.0),
            exact_match: s.exact_match,
            count: s.count,
        };
        Ok(())
    })
}
