use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::{Digest, StoreError};

/// Content-addressed blob directory: `<root>/<first 2 hex>/<remaining 62 hex>`.
///
/// Writes go to a temp file in `<root>/tmp` and are renamed into place, so a
/// reader never observes a partial blob.
#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("tmp"))?;
        Ok(Self { root })
    }

    pub fn path_for(&self, digest: &Digest) -> PathBuf {
        let hex = digest.to_hex();
        self.root.join(&hex[..2]).join(&hex[2..])
    }

    pub fn contains(&self, digest: &Digest) -> bool {
        self.path_for(digest).is_file()
    }

    pub fn put(&self, bytes: &[u8]) -> Result<Digest, StoreError> {
        let digest = Digest::of(bytes);
        let target = self.path_for(&digest);
        if target.is_file() {
            return Ok(digest);
        }
        self.write_atomic(&target, |f| f.write_all(bytes))?;
        Ok(digest)
    }

    /// Streams a file into the store without holding it in memory.
    pub fn put_file(&self, path: &Path) -> Result<Digest, StoreError> {
        let digest = Digest::of_reader(fs::File::open(path)?)?;
        let target = self.path_for(&digest);
        if !target.is_file() {
            self.write_atomic(&target, |f| {
                io::copy(&mut fs::File::open(path)?, f)?;
                Ok(())
            })?;
        }
        Ok(digest)
    }

    pub fn get(&self, digest: &Digest) -> Result<Vec<u8>, StoreError> {
        let bytes = match fs::read(self.path_for(digest)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(format!("blob {digest}")))
            }
            Err(e) => return Err(e.into()),
        };
        if Digest::of(&bytes) != *digest {
            return Err(StoreError::CorruptBlob(*digest));
        }
        Ok(bytes)
    }

    fn write_atomic(
        &self,
        target: &Path,
        fill: impl FnOnce(&mut fs::File) -> io::Result<()>,
    ) -> Result<(), StoreError> {
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut tmp = tempfile::NamedTempFile::new_in(self.root.join("tmp"))?;
        fill(tmp.as_file_mut())?;
        tmp.as_file().sync_all()?;
        tmp.persist(target).map_err(|e| StoreError::Io(e.error))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let blobs = BlobStore::open(dir.path()).unwrap();
        let a = blobs.put(b"abc").unwrap();
        let b = blobs.put(b"abc").unwrap();
        assert_eq!(a, b);
        let shard = dir.path().join(&a.to_hex()[..2]);
        assert_eq!(fs::read_dir(shard).unwrap().count(), 1);
        assert_eq!(blobs.get(&a).unwrap(), b"abc");
    }

    #[test]
    fn layout_matches_two_char_shard() {
        let dir = tempfile::tempdir().unwrap();
        let blobs = BlobStore::open(dir.path()).unwrap();
        let d = blobs.put(b"").unwrap();
        assert!(dir
            .path()
            .join("e3")
            .join("b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")
            .is_file());
        assert_eq!(blobs.get(&d).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn unknown_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let blobs = BlobStore::open(dir.path()).unwrap();
        assert!(matches!(
            blobs.get(&Digest::of(b"nope")),
            Err(StoreError::NotFound(_))
        ));
    }

    #[test]
    fn corruption_detected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let blobs = BlobStore::open(dir.path()).unwrap();
        let d = blobs.put(b"payload").unwrap();
        fs::write(blobs.path_for(&d), b"tampered").unwrap();
        assert!(matches!(blobs.get(&d), Err(StoreError::CorruptBlob(x)) if x == d));
    }

    #[test]
    fn put_file_streams() {
        let dir = tempfile::tempdir().unwrap();
        let blobs = BlobStore::open(dir.path().join("b")).unwrap();
        let src = dir.path().join("src.bin");
        fs::write(&src, vec![7u8; 200_000]).unwrap();
        let d = blobs.put_file(&src).unwrap();
        assert_eq!(d, Digest::of(&vec![7u8; 200_000]));
        assert_eq!(blobs.get(&d).unwrap().len(), 200_000);
    }
}
