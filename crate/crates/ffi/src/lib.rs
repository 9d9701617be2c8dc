//! C ABI over the semcert core.
//!
//! Every fallible function returns a [`SemcertStatus`]. On failure a message
//! is kept per thread and can be copied out with [`semcert_last_error`].
//! Ledgers are opaque handles released with [`semcert_ledger_free`]; strings
//! returned by the library are released with [`semcert_string_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use semcert::ledger::{replay_certification, verify_file, ChainStatus, EventId, Ledger, LedgerError, TestPayload, Verdict};
use semcert::stats::{normal_quantile, wilson_upper, ProtocolParams};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemcertStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    LedgerInvalid = 5,
    Replay = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemcertVerdict {
    Assent = 0,
    Neutral = 1,
    Dissent = 2,
}

impl From<SemcertVerdict> for Verdict {
    fn from(v: SemcertVerdict) -> Self {
        match v {
            SemcertVerdict::Assent => Verdict::Assent,
            SemcertVerdict::Neutral => Verdict::Neutral,
            SemcertVerdict::Dissent => Verdict::Dissent,
        }
    }
}

/// Opaque ledger handle.
pub struct SemcertLedger {
    inner: Ledger,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let message = CString::new(message.into().replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

fn fail(status: SemcertStatus, message: impl Into<String>) -> SemcertStatus {
    set_error(message);
    status
}

fn guard(body: impl FnOnce() -> SemcertStatus) -> SemcertStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(SemcertStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, SemcertStatus> {
    if p.is_null() {
        return Err(fail(SemcertStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(SemcertStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn ledger_status(e: LedgerError) -> SemcertStatus {
    match e {
        LedgerError::Tampered { seq } => fail(SemcertStatus::LedgerInvalid, format!("chain invalid at seq {seq}")),
        LedgerError::Io(io) => fail(SemcertStatus::Io, io.to_string()),
        other => fail(SemcertStatus::InvalidArgument, other.to_string()),
    }
}

/// Copies the calling thread's last error message into `buf` (nul
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator, or 0 if there is none.
#[no_mangle]
pub unsafe extern "C" fn semcert_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(message) = slot.as_ref() else { return 0 };
        let bytes = message.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// One-sided Wilson upper bound for `c` contradictions in `k` comparisons.
#[no_mangle]
pub unsafe extern "C" fn semcert_wilson_upper(c: u64, k: u64, delta: f64, out: *mut f64) -> SemcertStatus {
    guard(|| {
        if out.is_null() {
            return fail(SemcertStatus::NullArgument, "out is null");
        }
        match wilson_upper(c, k, delta) {
            Ok(u) => {
                *out = u;
                SemcertStatus::Ok
            }
            Err(e) => fail(SemcertStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Inverse standard normal CDF.
#[no_mangle]
pub unsafe extern "C" fn semcert_normal_quantile(p: f64, out: *mut f64) -> SemcertStatus {
    guard(|| {
        if out.is_null() {
            return fail(SemcertStatus::NullArgument, "out is null");
        }
        match normal_quantile(p) {
            Ok(z) => {
                *out = z;
                SemcertStatus::Ok
            }
            Err(e) => fail(SemcertStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Empty in-memory ledger. Never null.
#[no_mangle]
pub extern "C" fn semcert_ledger_new() -> *mut SemcertLedger {
    Box::into_raw(Box::new(SemcertLedger { inner: Ledger::new() }))
}

/// Opens (creating if absent) a file-backed ledger. Appends are written
/// through to the file.
#[no_mangle]
pub unsafe extern "C" fn semcert_ledger_open(path: *const c_char, out: *mut *mut SemcertLedger) -> SemcertStatus {
    guard(|| {
        if out.is_null() {
            return fail(SemcertStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Ledger::open(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SemcertLedger { inner }));
                SemcertStatus::Ok
            }
            Err(e) => ledger_status(e),
        }
    })
}

/// Releases a handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn semcert_ledger_free(ledger: *mut SemcertLedger) {
    if !ledger.is_null() {
        drop(Box::from_raw(ledger));
    }
}

#[no_mangle]
pub unsafe extern "C" fn semcert_ledger_len(ledger: *const SemcertLedger) -> u64 {
    ledger.as_ref().map_or(0, |l| l.inner.len() as u64)
}

/// Appends one witnessed test; its sequence number goes to `out_seq` when
/// that is not null.
#[no_mangle]
pub unsafe extern "C" fn semcert_ledger_append(
    ledger: *mut SemcertLedger,
    agent: *const c_char,
    pei: *const c_char,
    term: *const c_char,
    verdict: SemcertVerdict,
    epoch: u64,
    out_seq: *mut u64,
) -> SemcertStatus {
    guard(|| {
        let Some(ledger) = ledger.as_mut() else { return fail(SemcertStatus::NullArgument, "ledger is null") };
        let args = (|| Ok::<_, SemcertStatus>((str_arg(agent, "agent")?, str_arg(pei, "pei")?, str_arg(term, "term")?)))();
        let (agent, pei, term) = match args {
            Ok(a) => a,
            Err(s) => return s,
        };
        let event = match EventId::new(pei) {
            Ok(e) => e,
            Err(e) => return fail(SemcertStatus::InvalidArgument, e.to_string()),
        };
        let payload =
            TestPayload { agent: agent.to_string(), event, term: term.to_string(), verdict: verdict.into(), epoch };
        match ledger.inner.append(payload) {
            Ok(seq) => {
                if !out_seq.is_null() {
                    *out_seq = seq;
                }
                SemcertStatus::Ok
            }
            Err(e) => ledger_status(e),
        }
    })
}

/// `SEMCERT_STATUS_OK` for an intact chain; otherwise
/// `SEMCERT_STATUS_LEDGER_INVALID` with the first bad seq in `invalid_at`.
#[no_mangle]
pub unsafe extern "C" fn semcert_ledger_verify(ledger: *const SemcertLedger, invalid_at: *mut u64) -> SemcertStatus {
    guard(|| {
        let Some(ledger) = ledger.as_ref() else { return fail(SemcertStatus::NullArgument, "ledger is null") };
        chain_status(ledger.inner.verify(), invalid_at)
    })
}

unsafe fn chain_status(status: ChainStatus, invalid_at: *mut u64) -> SemcertStatus {
    match status {
        ChainStatus::Valid => SemcertStatus::Ok,
        ChainStatus::Invalid { invalid_at: seq } => {
            if !invalid_at.is_null() {
                *invalid_at = seq;
            }
            fail(SemcertStatus::LedgerInvalid, format!("chain invalid at seq {seq}"))
        }
    }
}

/// Verifies a ledger file without loading it into a handle.
#[no_mangle]
pub unsafe extern "C" fn semcert_verify_file(path: *const c_char, invalid_at: *mut u64) -> SemcertStatus {
    guard(|| {
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match verify_file(Path::new(path)) {
            Ok(status) => chain_status(status, invalid_at),
            Err(e) => ledger_status(e),
        }
    })
}

/// Writes the ledger as JSON lines to `path`.
#[no_mangle]
pub unsafe extern "C" fn semcert_ledger_write(ledger: *const SemcertLedger, path: *const c_char) -> SemcertStatus {
    guard(|| {
        let Some(ledger) = ledger.as_ref() else { return fail(SemcertStatus::NullArgument, "ledger is null") };
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ledger.inner.write_to(path) {
            Ok(()) => SemcertStatus::Ok,
            Err(e) => ledger_status(e),
        }
    })
}

/// Replays the certification of `epoch` and returns the certified core as
/// a JSON string in `out_json`, to be freed with [`semcert_string_free`].
#[no_mangle]
pub unsafe extern "C" fn semcert_ledger_replay_json(
    ledger: *const SemcertLedger,
    tau: f64,
    delta: f64,
    rho_min: f64,
    epoch: u64,
    out_json: *mut *mut c_char,
) -> SemcertStatus {
    guard(|| {
        if out_json.is_null() {
            return fail(SemcertStatus::NullArgument, "out_json is null");
        }
        *out_json = ptr::null_mut();
        let Some(ledger) = ledger.as_ref() else { return fail(SemcertStatus::NullArgument, "ledger is null") };
        let params = match ProtocolParams::new(tau, delta, rho_min) {
            Ok(p) => p,
            Err(e) => return fail(SemcertStatus::InvalidArgument, e.to_string()),
        };
        match replay_certification(ledger.inner.entries(), &params, epoch) {
            Ok(core) => {
                let json = serde_json::to_string(&core).expect("core serializes");
                *out_json = CString::new(json).expect("json has no nul").into_raw();
                SemcertStatus::Ok
            }
            Err(e) => fail(SemcertStatus::Replay, e.to_string()),
        }
    })
}

/// Releases a string returned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn semcert_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
