use std::io;
use std::os::unix::process::ExitStatusExt;
use std::process::{Child, ExitStatus};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

/// Grace period between SIGTERM and SIGKILL.
const KILL_GRACE: Duration = Duration::from_secs(2);

/// Signals the process group led by `pid`.
pub(crate) fn signal_group(pid: u32, signal: libc::c_int) {
    // SAFETY: kill(2) has no memory-safety preconditions.
    unsafe {
        libc::kill(-(pid as libc::pid_t), signal);
    }
}

/// Shell-style exit code: the exit status, or 128 + signal number.
pub(crate) fn exit_code(status: ExitStatus) -> i32 {
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1)
}

/// Kills the child's process group once `timeout` elapses, unless disarmed first.
pub(crate) struct Watchdog {
    disarm: mpsc::Sender<()>,
    handle: JoinHandle<bool>,
}

impl Watchdog {
    pub(crate) fn arm(pid: u32, timeout: Duration) -> Self {
        let (disarm, rx) = mpsc::channel::<()>();
        let handle = thread::spawn(move || {
            match rx.recv_timeout(timeout) {
                Err(RecvTimeoutError::Timeout) => {}
                _ => return false,
            }
            signal_group(pid, libc::SIGTERM);
            if let Err(RecvTimeoutError::Timeout) = rx.recv_timeout(KILL_GRACE) {
                signal_group(pid, libc::SIGKILL);
            }
            true
        });
        Self { disarm, handle }
    }

    /// Stops the watchdog and reports whether it fired.
    pub(crate) fn disarm(self) -> bool {
        let _ = self.disarm.send(());
        self.handle.join().unwrap_or(false)
    }
}

/// Waits for `child`, terminating its process group on timeout.
pub(crate) fn wait_with_timeout(
    child: &mut Child,
    timeout: Option<Duration>,
) -> io::Result<(ExitStatus, bool)> {
    let Some(timeout) = timeout else {
        return child.wait().map(|s| (s, false));
    };
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok((status, false));
        }
        if Instant::now() >= deadline {
            signal_group(child.id(), libc::SIGTERM);
            let grace = Instant::now() + KILL_GRACE;
            loop {
                if let Some(status) = child.try_wait()? {
                    return Ok((status, true));
                }
                if Instant::now() >= grace {
                    signal_group(child.id(), libc::SIGKILL);
                    return child.wait().map(|s| (s, true));
                }
                thread::sleep(Duration::from_millis(20));
            }
        }
        thread::sleep(Duration::from_millis(20));
    }
}
