//! Write-once image blob stores keyed by URI.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use super::ImageUri;

pub trait BlobStore: Send + Sync {
    /// Stores PNG bytes under `uri`. A second put for an existing uri is a
    /// no-op.
    fn put(&self, uri: &ImageUri, png: &[u8]) -> io::Result<()>;
    fn get(&self, uri: &ImageUri) -> io::Result<Option<Vec<u8>>>;
    fn contains(&self, uri: &ImageUri) -> bool {
        matches!(self.get(uri), Ok(Some(_)))
    }
}

#[derive(Default)]
pub struct MemoryBlobs {
    map: RwLock<HashMap<ImageUri, Arc<Vec<u8>>>>,
}

impl MemoryBlobs {
    pub fn new() -> MemoryBlobs {
        MemoryBlobs::default()
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("blob lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl BlobStore for MemoryBlobs {
    fn put(&self, uri: &ImageUri, png: &[u8]) -> io::Result<()> {
        self.map
            .write()
            .expect("blob lock")
            .entry(uri.clone())
            .or_insert_with(|| Arc::new(png.to_vec()));
        Ok(())
    }

    fn get(&self, uri: &ImageUri) -> io::Result<Option<Vec<u8>>> {
        Ok(self.map.read().expect("blob lock").get(uri).map(|b| b.as_ref().clone()))
    }

    fn contains(&self, uri: &ImageUri) -> bool {
        self.map.read().expect("blob lock").contains_key(uri)
    }
}

/// One `<uri>.png` file per blob. Files are written to a temporary name and
/// renamed so readers never observe partial blobs.
pub struct DirBlobs {
    dir: PathBuf,
}

impl DirBlobs {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<DirBlobs> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(DirBlobs { dir })
    }

    pub fn path_of(&self, uri: &ImageUri) -> PathBuf {
        self.dir.join(format!("{}.png", uri.as_str()))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl BlobStore for DirBlobs {
    fn put(&self, uri: &ImageUri, png: &[u8]) -> io::Result<()> {
        let path = self.path_of(uri);
        if path.exists() {
            return Ok(());
        }
        let tmp = self.dir.join(format!(".{}.{}.tmp", uri.as_str(), std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(png)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)
    }

    fn get(&self, uri: &ImageUri) -> io::Result<Option<Vec<u8>>> {
        if !uri.is_well_formed() {
            return Ok(None);
        }
        match fs::read(self.path_of(uri)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn contains(&self, uri: &ImageUri) -> bool {
        uri.is_well_formed() && self.path_of(uri).exists()
    }
}

/// Reads fall through to `base`; writes stay in memory until
/// [`Overlay::flush_to`] is called. Used to stage a turn's images.
pub struct Overlay {
    top: MemoryBlobs,
    base: Arc<dyn BlobStore>,
}

impl Overlay {
    pub fn new(base: Arc<dyn BlobStore>) -> Overlay {
        Overlay {
            top: MemoryBlobs::new(),
            base,
        }
    }

    pub fn staged(&self, uri: &ImageUri) -> Option<Vec<u8>> {
        self.top.get(uri).ok().flatten()
    }
}

impl BlobStore for Overlay {
    fn put(&self, uri: &ImageUri, png: &[u8]) -> io::Result<()> {
        if self.base.contains(uri) {
            return Ok(());
        }
        self.top.put(uri, png)
    }

    fn get(&self, uri: &ImageUri) -> io::Result<Option<Vec<u8>>> {
        match self.top.get(uri)? {
            Some(b) => Ok(Some(b)),
            None => self.base.get(uri),
        }
    }

    fn contains(&self, uri: &ImageUri) -> bool {
        self.top.contains(uri) || self.base.contains(uri)
    }
}
