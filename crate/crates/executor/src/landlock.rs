//! Minimal Landlock binding: confine filesystem writes of a child process to
//! a set of directories while leaving reads and execution unrestricted.
//!
//! The ruleset is assembled in the parent; the child only calls
//! `prctl(NO_NEW_PRIVS)` and `landlock_restrict_self`, both of which are
//! async-signal-safe and allocation free.

use std::ffi::CString;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};
use std::os::unix::ffi::OsStrExt;
use std::path::Path;

const CREATE_RULESET_VERSION: u32 = 1;
const RULE_PATH_BENEATH: libc::c_int = 1;

const WRITE_FILE: u64 = 1 << 1;
const REMOVE_DIR: u64 = 1 << 4;
const REMOVE_FILE: u64 = 1 << 5;
const MAKE_CHAR: u64 = 1 << 6;
const MAKE_DIR: u64 = 1 << 7;
const MAKE_REG: u64 = 1 << 8;
const MAKE_SOCK: u64 = 1 << 9;
const MAKE_FIFO: u64 = 1 << 10;
const MAKE_BLOCK: u64 = 1 << 11;
const MAKE_SYM: u64 = 1 << 12;
const REFER: u64 = 1 << 13;
const TRUNCATE: u64 = 1 << 14;

#[repr(C)]
struct RulesetAttr {
    handled_access_fs: u64,
}

#[repr(C, packed)]
struct PathBeneathAttr {
    allowed_access: u64,
    parent_fd: i32,
}

/// Landlock ABI version supported by the running kernel, if any.
pub fn landlock_abi() -> Option<u32> {
    // SAFETY: querying the ABI version takes no pointers.
    let r = unsafe {
        libc::syscall(
            libc::SYS_landlock_create_ruleset,
            std::ptr::null::<RulesetAttr>(),
            0usize,
            CREATE_RULESET_VERSION,
        )
    };
    (r > 0).then_some(r as u32)
}

fn write_rights(abi: u32) -> u64 {
    let mut rights = WRITE_FILE
        | REMOVE_DIR
        | REMOVE_FILE
        | MAKE_CHAR
        | MAKE_DIR
        | MAKE_REG
        | MAKE_SOCK
        | MAKE_FIFO
        | MAKE_BLOCK
        | MAKE_SYM;
    if abi >= 2 {
        rights |= REFER;
    }
    if abi >= 3 {
        rights |= TRUNCATE;
    }
    rights
}

fn file_write_rights(abi: u32) -> u64 {
    if abi >= 3 {
        WRITE_FILE | TRUNCATE
    } else {
        WRITE_FILE
    }
}

/// A prepared write-confinement ruleset.
pub struct WriteRuleset {
    fd: OwnedFd,
}

impl WriteRuleset {
    /// Builds a ruleset allowing writes only below `dirs` and to the
    /// individual `files`. Returns `Ok(None)` when the kernel lacks Landlock.
    pub fn new(dirs: &[&Path], files: &[&Path]) -> io::Result<Option<Self>> {
        let Some(abi) = landlock_abi() else {
            return Ok(None);
        };
        let attr = RulesetAttr {
            handled_access_fs: write_rights(abi),
        };
        // SAFETY: attr is a valid, initialized struct of the size passed.
        let fd = unsafe {
            libc::syscall(
                libc::SYS_landlock_create_ruleset,
                &attr as *const RulesetAttr,
                std::mem::size_of::<RulesetAttr>(),
                0u32,
            )
        };
        if fd < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: the syscall returned a fresh descriptor we now own.
        let ruleset = WriteRuleset {
            fd: unsafe { OwnedFd::from_raw_fd(fd as RawFd) },
        };
        for dir in dirs {
            ruleset.add(dir, write_rights(abi))?;
        }
        for file in files {
            ruleset.add(file, file_write_rights(abi))?;
        }
        Ok(Some(ruleset))
    }

    fn add(&self, path: &Path, allowed: u64) -> io::Result<()> {
        let c = CString::new(path.as_os_str().as_bytes())
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        // SAFETY: c is a valid NUL-terminated path.
        let pfd = unsafe { libc::open(c.as_ptr(), libc::O_PATH | libc::O_CLOEXEC) };
        if pfd < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: pfd was just opened and is owned here.
        let pfd = unsafe { OwnedFd::from_raw_fd(pfd) };
        let attr = PathBeneathAttr {
            allowed_access: allowed,
            parent_fd: pfd.as_raw_fd(),
        };
        // SAFETY: both descriptors are valid and attr is fully initialized.
        let r = unsafe {
            libc::syscall(
                libc::SYS_landlock_add_rule,
                self.fd.as_raw_fd(),
                RULE_PATH_BENEATH,
                &attr as *const PathBeneathAttr,
                0u32,
            )
        };
        if r < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(())
    }

    pub fn raw_fd(&self) -> RawFd {
        self.fd.as_raw_fd()
    }
}

/// Applies a ruleset to the calling thread. Meant for `pre_exec`.
pub fn restrict_self(ruleset_fd: RawFd) -> io::Result<()> {
    // SAFETY: plain syscalls on integers; safe between fork and exec.
    unsafe {
        if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
            return Err(io::Error::last_os_error());
        }
        if libc::syscall(libc::SYS_landlock_restrict_self, ruleset_fd, 0u32) != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(())
}
