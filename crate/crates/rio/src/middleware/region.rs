//! Word regions backing the in-process and shared-memory transports.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::ops::Deref;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use memmap2::MmapRaw;
use rio_core::ring::heap_region;
use rio_core::rpc::RequestChannel;
use rio_core::{ApiSchema, RingBuffer, SchemaDescriptor};

use super::ports::{ChannelReplier, ChannelRequester, RingPublisher, RingSubscriber};
use super::{BackendKind, MiddlewareError, PublisherPort, ReplierPort, RequesterPort, SubscriberPort, Transport};

const LOCK_FILE: &str = ".lock";

/// A region of atomic words, either on the heap or mapped from a file.
///
/// One extra trailing word, hidden from `Deref`, is the region's bell:
/// writers ring it after a request or reply so waiters can block on it.
#[derive(Clone)]
pub(crate) enum Region {
    Heap(Arc<[AtomicU64]>),
    Mapped(Arc<MmapRaw>),
}

impl Region {
    fn all_words(&self) -> &[AtomicU64] {
        match self {
            Region::Heap(h) => h,
            // SAFETY: the mapping is page aligned, lives as long as the Arc and
            // is only accessed through atomics.
            Region::Mapped(m) => unsafe { std::slice::from_raw_parts(m.as_ptr() as *const AtomicU64, m.len() / 8) },
        }
    }

    fn bell(&self) -> &AtomicU32 {
        let w = self.all_words().last().expect("region has a bell word");
        // SAFETY: the bell word is only ever accessed through this 32-bit view.
        unsafe { &*(w as *const AtomicU64 as *const AtomicU32) }
    }

    pub(crate) fn bell_seq(&self) -> u32 {
        self.bell().load(Ordering::Acquire)
    }

    pub(crate) fn ring_bell(&self) {
        let bell = self.bell();
        bell.fetch_add(1, Ordering::AcqRel);
        futex_wake(bell);
    }

    /// Blocks until the bell moves past `seen` or `timeout` elapses.
    pub(crate) fn wait_bell(&self, seen: u32, timeout: Duration) {
        let bell = self.bell();
        if bell.load(Ordering::Acquire) == seen {
            futex_wait(bell, seen, timeout);
        }
    }
}

#[cfg(target_os = "linux")]
fn futex_wait(word: &AtomicU32, seen: u32, timeout: Duration) {
    let ts = libc::timespec { tv_sec: timeout.as_secs() as libc::time_t, tv_nsec: timeout.subsec_nanos() as _ };
    // SAFETY: the word outlives the call; the kernel only reads it. Not
    // FUTEX_PRIVATE because mapped regions are shared between processes.
    unsafe {
        libc::syscall(libc::SYS_futex, word.as_ptr(), libc::FUTEX_WAIT, seen, &ts as *const libc::timespec, 0usize, 0u32);
    }
}

#[cfg(target_os = "linux")]
fn futex_wake(word: &AtomicU32) {
    // SAFETY: wakes waiters on the word's address; no memory is accessed.
    unsafe {
        libc::syscall(libc::SYS_futex, word.as_ptr(), libc::FUTEX_WAKE, i32::MAX, 0usize, 0usize, 0u32);
    }
}

#[cfg(not(target_os = "linux"))]
fn futex_wait(_word: &AtomicU32, _seen: u32, timeout: Duration) {
    std::thread::sleep(timeout.min(Duration::from_micros(50)));
}

#[cfg(not(target_os = "linux"))]
fn futex_wake(_word: &AtomicU32) {}

impl Deref for Region {
    type Target = [AtomicU64];
    fn deref(&self) -> &[AtomicU64] {
        let all = self.all_words();
        &all[..all.len() - 1]
    }
}

/// Where regions live.
pub(crate) trait RegionStore: Send + Sync {
    /// Creates a fresh zeroed region, replacing any previous one.
    fn create(&self, name: &str, words: usize) -> Result<Region, MiddlewareError>;
    /// Opens an existing region, or `None` when it does not exist yet.
    fn open(&self, name: &str) -> Result<Option<Region>, MiddlewareError>;
    fn close(&self);
}

#[derive(Default)]
pub(crate) struct HeapStore {
    regions: Mutex<HashMap<String, Region>>,
}

impl RegionStore for HeapStore {
    fn create(&self, name: &str, words: usize) -> Result<Region, MiddlewareError> {
        let r = Region::Heap(heap_region(words + 1));
        self.regions.lock().unwrap().insert(name.to_string(), r.clone());
        Ok(r)
    }

    fn open(&self, name: &str) -> Result<Option<Region>, MiddlewareError> {
        Ok(self.regions.lock().unwrap().get(name).cloned())
    }

    fn close(&self) {
        self.regions.lock().unwrap().clear();
    }
}

/// Directory holding a namespace's region files.
pub fn shm_dir(namespace: &str) -> PathBuf {
    PathBuf::from("/dev/shm").join(format!("rio-{namespace}"))
}

fn file_name(name: &str) -> String {
    name.replace('%', "%25").replace('/', "%2F")
}

fn pid_alive(pid: i32) -> bool {
    // SAFETY: signal 0 performs only the existence and permission check.
    pid > 0 && (unsafe { libc::kill(pid, 0) } == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM))
}

pub(crate) struct ShmStore {
    namespace: String,
    dir: PathBuf,
    owner: bool,
    closed: Mutex<bool>,
}

impl ShmStore {
    /// Takes the namespace lock, reclaiming it from a dead owner.
    pub(crate) fn owner(namespace: &str) -> Result<Self, MiddlewareError> {
        if namespace.is_empty() || namespace.contains('/') {
            return Err(MiddlewareError::InvalidConfig(format!("bad shm namespace `{namespace}`")));
        }
        let dir = shm_dir(namespace);
        fs::create_dir_all(&dir)?;
        let lock = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&lock) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id())?;
                    clear_regions(&dir);
                    return Ok(ShmStore { namespace: namespace.into(), dir, owner: true, closed: Mutex::new(false) });
                }
                Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                    let pid = fs::read_to_string(&lock).ok().and_then(|s| s.trim().parse::<i32>().ok()).unwrap_or(0);
                    if pid_alive(pid) {
                        return Err(MiddlewareError::ShmNamespaceCollision { namespace: namespace.into(), pid });
                    }
                    // stale lock left by a crashed owner
                    let _ = fs::remove_file(&lock);
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(MiddlewareError::ShmNamespaceCollision { namespace: namespace.into(), pid: 0 })
    }

    pub(crate) fn attach(namespace: &str) -> Result<Self, MiddlewareError> {
        let dir = shm_dir(namespace);
        if !dir.join(LOCK_FILE).exists() {
            return Err(MiddlewareError::InvalidConfig(format!("shm namespace `{namespace}` is not open")));
        }
        Ok(ShmStore { namespace: namespace.into(), dir, owner: false, closed: Mutex::new(false) })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(file_name(name))
    }
}

fn clear_regions(dir: &Path) {
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            if e.file_name() != LOCK_FILE {
                let _ = fs::remove_file(e.path());
            }
        }
    }
}

fn map(file: &File) -> Result<Region, MiddlewareError> {
    Ok(Region::Mapped(Arc::new(MmapRaw::map_raw(file)?)))
}

impl RegionStore for ShmStore {
    fn create(&self, name: &str, words: usize) -> Result<Region, MiddlewareError> {
        let path = self.path(name);
        let _ = fs::remove_file(&path);
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(&path)?;
        file.set_len(((words + 1) * 8) as u64)?;
        map(&file)
    }

    fn open(&self, name: &str) -> Result<Option<Region>, MiddlewareError> {
        match OpenOptions::new().read(true).write(true).open(self.path(name)) {
            Ok(f) if f.metadata()?.len() >= 16 => Ok(Some(map(&f)?)),
            Ok(_) => Ok(None),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn close(&self) {
        let mut closed = self.closed.lock().unwrap();
        if *closed {
            return;
        }
        *closed = true;
        if self.owner {
            clear_regions(&self.dir);
            let _ = fs::remove_file(self.dir.join(LOCK_FILE));
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

impl Drop for ShmStore {
    fn drop(&mut self) {
        self.close();
    }
}

/// Transport for both region-based backends.
pub(crate) struct RegionTransport {
    kind: BackendKind,
    store: Arc<dyn RegionStore>,
}

impl RegionTransport {
    pub(crate) fn inproc() -> Self {
        RegionTransport { kind: BackendKind::Inproc, store: Arc::new(HeapStore::default()) }
    }

    pub(crate) fn shm_owner(namespace: &str) -> Result<Self, MiddlewareError> {
        let store = ShmStore::owner(namespace)?;
        Ok(RegionTransport { kind: BackendKind::Shm { namespace: store.namespace.clone() }, store: Arc::new(store) })
    }

    pub(crate) fn shm_attach(namespace: &str) -> Result<Self, MiddlewareError> {
        let store = ShmStore::attach(namespace)?;
        Ok(RegionTransport { kind: BackendKind::Shm { namespace: store.namespace.clone() }, store: Arc::new(store) })
    }
}

impl Transport for RegionTransport {
    fn kind(&self) -> BackendKind {
        self.kind.clone()
    }

    fn publisher(
        &self,
        topic: &str,
        schema: &SchemaDescriptor,
        capacity: usize,
    ) -> Result<Box<dyn PublisherPort>, MiddlewareError> {
        let words = RingBuffer::<Region>::region_words(schema, capacity);
        let region = self.store.create(topic, words)?;
        let ring = RingBuffer::create(region, schema, capacity)?;
        Ok(Box::new(RingPublisher::new(topic, ring)))
    }

    fn subscriber(&self, topic: &str, schema: &SchemaDescriptor) -> Result<Box<dyn SubscriberPort>, MiddlewareError> {
        Ok(Box::new(RingSubscriber::new(topic, schema.clone(), self.store.clone())))
    }

    fn replier(&self, topic: &str, api: &ApiSchema, capacity: usize) -> Result<Box<dyn ReplierPort>, MiddlewareError> {
        let mailboxes = rio_core::rpc::DEFAULT_MAILBOXES;
        let words = RequestChannel::<Region>::region_words(api, capacity, mailboxes);
        let region = self.store.create(topic, words)?;
        let chan = RequestChannel::create(region, api, capacity, mailboxes)?;
        Ok(Box::new(ChannelReplier::new(topic, chan)))
    }

    fn requester(&self, topic: &str, api: &ApiSchema) -> Result<Box<dyn RequesterPort>, MiddlewareError> {
        Ok(Box::new(ChannelRequester::new(topic, api.clone(), self.store.clone())))
    }

    fn close(&self) {
        self.store.close();
    }
}
