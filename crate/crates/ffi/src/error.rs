use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, UnwindSafe};

use baved_ser::backbones::BackboneError;
use baved_ser::dataset::DatasetError;
use baved_ser::heads::HeadError;
use baved_ser::metrics::MetricsError;
use baved_ser::trainer::TrainError;

/// Result code returned by every fallible `bs_` function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    DataError = 4,
    BackboneError = 5,
    CorruptCacheEntry = 6,
    HeadError = 7,
    MetricsError = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

pub(crate) struct Failure {
    pub status: BsStatus,
    pub message: String,
}

impl Failure {
    pub fn new(status: BsStatus, message: impl Into<String>) -> Self {
        Failure { status, message: message.into() }
    }

    pub fn null(what: &str) -> Self {
        Failure::new(BsStatus::NullArgument, format!("{what} is null"))
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Failure::new(BsStatus::InvalidArgument, message)
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure::new(BsStatus::DataError, e.to_string())
    }
}

impl From<BackboneError> for Failure {
    fn from(e: BackboneError) -> Self {
        let status = match e {
            BackboneError::CorruptCacheEntry { .. } => BsStatus::CorruptCacheEntry,
            _ => BsStatus::BackboneError,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<HeadError> for Failure {
    fn from(e: HeadError) -> Self {
        Failure::new(BsStatus::HeadError, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        Failure::new(BsStatus::HeadError, e.to_string())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::new(BsStatus::MetricsError, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `body`, records any failure as the thread's last error and maps it to a status.
pub(crate) fn guard(body: impl FnOnce() -> Result<(), Failure> + UnwindSafe) -> BsStatus {
    match catch_unwind(body) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            BsStatus::Ok
        }
        Ok(Err(f)) => {
            set_last_error(&f.message);
            f.status
        }
        Err(_) => {
            set_last_error("internal panic");
            BsStatus::Panic
        }
    }
}

/// Borrows a NUL-terminated UTF-8 string.
///
/// # Safety
/// `ptr` must be null or point to a NUL-terminated string that outlives `'a`.
pub(crate) unsafe fn c_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| Failure::new(BsStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Message for the most recent failure on this thread, or null after a success.
/// The pointer stays valid until the next `bs_` call on the same thread.
#[no_mangle]
pub extern "C" fn bs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static, human-readable name of a status code.
#[no_mangle]
pub extern "C" fn bs_status_name(status: BsStatus) -> *const c_char {
    let name: &'static CStr = match status {
        BsStatus::Ok => c"ok",
        BsStatus::NullArgument => c"null argument",
        BsStatus::InvalidUtf8 => c"invalid utf-8",
        BsStatus::InvalidArgument => c"invalid argument",
        BsStatus::DataError => c"data error",
        BsStatus::BackboneError => c"backbone error",
        BsStatus::CorruptCacheEntry => c"corrupt cache entry",
        BsStatus::HeadError => c"head error",
        BsStatus::MetricsError => c"metrics error",
        BsStatus::Panic => c"panic",
    };
    name.as_ptr()
}
