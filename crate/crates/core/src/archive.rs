//! Gzipped tar archives used for process payloads, output bundles and the
//! aggregated request download.
//!
//! Archives are built deterministically: entries sorted by path, zero
//! mtimes, fixed modes. Equal directory contents give equal bytes.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

/// Packs explicit `(path, bytes)` entries.
pub fn pack_entries<P: AsRef<str>, B: AsRef<[u8]>>(entries: &[(P, B)]) -> io::Result<Vec<u8>> {
    let mut sorted: Vec<(&str, &[u8])> = entries
        .iter()
        .map(|(p, b)| (p.as_ref(), b.as_ref()))
        .collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let encoder = GzEncoder::new(Vec::new(), Compression::default());
    let mut builder = tar::Builder::new(encoder);
    for (path, bytes) in sorted {
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_entry_type(tar::EntryType::Regular);
        builder.append_data(&mut header, path, bytes)?;
    }
    builder.into_inner()?.finish()
}

/// Packs every regular file below `dir`, with paths relative to it.
/// Symlinks are skipped.
pub fn pack_dir(dir: &Path) -> io::Result<Vec<u8>> {
    let mut entries = Vec::new();
    collect_files(dir, dir, &mut entries)?;
    pack_entries(&entries)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let ty = entry.file_type()?;
        let path = entry.path();
        if ty.is_dir() {
            collect_files(root, &path, out)?;
        } else if ty.is_file() {
            let rel = path
                .strip_prefix(root)
                .map_err(|e| io::Error::other(e.to_string()))?
                .to_string_lossy()
                .replace('\\', "/");
            out.push((rel, fs::read(&path)?));
        }
    }
    Ok(())
}

/// Reads all regular-file entries as `(path, bytes)`, in archive order.
pub fn read_entries(archive: &[u8]) -> io::Result<Vec<(String, Vec<u8>)>> {
    let mut tar = tar::Archive::new(GzDecoder::new(archive));
    let mut out = Vec::new();
    for entry in tar.entries()? {
        let mut entry = entry?;
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let path = entry.path()?.to_string_lossy().into_owned();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes)?;
        out.push((path, bytes));
    }
    Ok(out)
}

/// Extracts into `dest`, refusing entries that would escape it. Returns the
/// extracted file paths.
pub fn unpack_into(archive: &[u8], dest: &Path) -> io::Result<Vec<String>> {
    fs::create_dir_all(dest)?;
    let mut tar = tar::Archive::new(GzDecoder::new(archive));
    let mut files = Vec::new();
    for entry in tar.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.to_string_lossy().into_owned();
        let is_file = entry.header().entry_type().is_file();
        if !entry.unpack_in(dest)? {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("archive entry {path:?} escapes the destination"),
            ));
        }
        if is_file {
            files.push(path);
        }
    }
    Ok(files)
}

/// Lists the regular files of an archive.
pub fn list_files(archive: &[u8]) -> io::Result<Vec<String>> {
    Ok(read_entries(archive)?.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_round_trip_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("sub")).unwrap();
        fs::write(tmp.path().join("output.txt"), b"hello\n").unwrap();
        fs::write(tmp.path().join("sub/data.csv"), b"1,2\n").unwrap();
        let a = pack_dir(tmp.path()).unwrap();
        let b = pack_dir(tmp.path()).unwrap();
        assert_eq!(a, b);
        let entries = read_entries(&a).unwrap();
        assert_eq!(
            entries,
            vec![
                ("output.txt".to_string(), b"hello\n".to_vec()),
                ("sub/data.csv".to_string(), b"1,2\n".to_vec()),
            ]
        );
        let out = tempfile::tempdir().unwrap();
        let files = unpack_into(&a, out.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(fs::read(out.path().join("sub/data.csv")).unwrap(), b"1,2\n");
    }

    #[test]
    fn empty_dir_packs() {
        let tmp = tempfile::tempdir().unwrap();
        let a = pack_dir(tmp.path()).unwrap();
        assert!(read_entries(&a).unwrap().is_empty());
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(read_entries(b"not an archive").is_err());
    }
}
