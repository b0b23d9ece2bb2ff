//! C ABI over the facerep core: load or build a network, extract feature
//! vectors, compare them.
//!
//! Every fallible call returns an [`FrStatus`]; on failure the message is
//! available from [`fr_last_error`] on the same thread. Handles are opaque
//! and must be released with [`fr_network_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use facerep::graph::{builtin_with_crop, load_model, parse_descriptor, save_model, with_fnl, Network};
use facerep::tensor::Tensor;
use facerep::{cli, dataio, eval, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Data = 3,
    Numeric = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque network handle.
pub struct FrNetwork {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = s);
}

fn status_of(e: &Error) -> FrStatus {
    match cli::exit_code(e) {
        cli::EXIT_USAGE => FrStatus::InvalidArgument,
        cli::EXIT_DATA => FrStatus::Data,
        _ => FrStatus::Numeric,
    }
}

struct Fail(FrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FrStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FrStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            FrStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FrStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(FrStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn net_arg<'a>(p: *const FrNetwork) -> Result<&'a Network, Fail> {
    p.as_ref().map(|h| &h.net).ok_or_else(|| null("network"))
}

unsafe fn out_slice<'a>(p: *mut f32, len: usize, need: usize) -> Result<&'a mut [f32], Fail> {
    if p.is_null() {
        return Err(null("output buffer"));
    }
    if len < need {
        return Err(Fail(FrStatus::BufferTooSmall, format!("output buffer holds {len} floats, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn emit(out: *mut *mut FrNetwork, net: Network) -> Result<(), Fail> {
    *out = Box::into_raw(Box::new(FrNetwork { net }));
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model container from `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_network_load(path: *const c_char, out: *mut *mut FrNetwork) -> FrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        emit(out, load_model(path)?)
    })
}

/// Builds a named reference architecture at `crop`×`crop` with MSRA weights
/// drawn from `seed`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_network_from_builtin(
    name: *const c_char,
    crop: usize,
    fnl: bool,
    seed: u64,
    out: *mut *mut FrNetwork,
) -> FrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut d = builtin_with_crop(str_arg(name, "name")?, crop)?;
        if fnl {
            d = with_fnl(&d)?;
        }
        emit(out, Network::new(d, seed)?)
    })
}

/// Builds a network from descriptor text with MSRA weights drawn from `seed`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_network_from_descriptor(text: *const c_char, seed: u64, out: *mut *mut FrNetwork) -> FrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = parse_descriptor(str_arg(text, "descriptor")?)?;
        emit(out, Network::new(d, seed)?)
    })
}

/// # Safety
/// `net` must come from this library; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fr_network_save(net: *const FrNetwork, path: *const c_char) -> FrStatus {
    guard(|| {
        let net = net_arg(net)?;
        save_model(net, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fr_network_free(net: *mut FrNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Writes the per-sample input shape (channels, height, width).
///
/// # Safety
/// `net` must come from this library; `dims` must hold 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn fr_network_input_shape(net: *const FrNetwork, dims: *mut usize) -> FrStatus {
    guard(|| {
        let net = net_arg(net)?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        let shape = net.descriptor().input_shape.dims();
        let &[c, h, w] = shape else {
            return Err(Fail(FrStatus::InvalidArgument, format!("input shape {shape:?} is not (C, H, W)")));
        };
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&[c, h, w]);
        Ok(())
    })
}

/// Length of the feature vector.
///
/// # Safety
/// `net` must come from this library; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_network_feature_len(net: *const FrNetwork, pre_relu: bool, len: *mut usize) -> FrStatus {
    guard(|| {
        let net = net_arg(net)?;
        if len.is_null() {
            return Err(null("len"));
        }
        let key = eval::feature_key(net, pre_relu)?;
        *len = net.edge_shapes()[&key].count();
        Ok(())
    })
}

/// Feature vector of one already-preprocessed C×H×W input.
///
/// # Safety
/// `net` must come from this library; `input` must hold `input_len` floats
/// and `out` `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn fr_network_extract(
    net: *const FrNetwork,
    input: *const f32,
    input_len: usize,
    pre_relu: bool,
    out: *mut f32,
    out_len: usize,
) -> FrStatus {
    guard(|| {
        let net = net_arg(net)?;
        if input.is_null() {
            return Err(null("input"));
        }
        let shape = net.descriptor().input_shape.clone();
        if input_len != shape.count() {
            return Err(Fail(
                FrStatus::InvalidArgument,
                format!("input holds {input_len} floats, network expects {shape}"),
            ));
        }
        let x = Tensor::from_vec(shape, std::slice::from_raw_parts(input, input_len).to_vec())?;
        let v = eval::extract_feature(net, &x, pre_relu)?;
        out_slice(out, out_len, v.len())?[..v.len()].copy_from_slice(&v);
        Ok(())
    })
}

/// Feature vector of a PGM/PPM image, with the model's mean subtraction and
/// centre crop applied.
///
/// # Safety
/// `net` must come from this library; `path` must be a NUL-terminated string
/// and `out` must hold `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn fr_network_extract_image(
    net: *const FrNetwork,
    path: *const c_char,
    pre_relu: bool,
    out: *mut f32,
    out_len: usize,
) -> FrStatus {
    guard(|| {
        let net = net_arg(net)?;
        let image = dataio::load_image(Path::new(str_arg(path, "path")?))?;
        let x = cli::preprocess(net, &image)?;
        let v = eval::extract_feature(net, &x, pre_relu)?;
        out_slice(out, out_len, v.len())?[..v.len()].copy_from_slice(&v);
        Ok(())
    })
}

/// Cosine similarity of two length-`len` vectors.
///
/// # Safety
/// `a` and `b` must hold `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_cosine(a: *const f32, b: *const f32, len: usize, out: *mut f64) -> FrStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let (a, b) = (std::slice::from_raw_parts(a, len), std::slice::from_raw_parts(b, len));
        *out = eval::cosine(a, b)?;
        Ok(())
    })
}
