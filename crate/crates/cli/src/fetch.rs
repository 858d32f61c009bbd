//! Optional MNIST download with checksum verification.

use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context};
use md5::{Digest, Md5};

use sensprune::data::MNIST_FILES;

pub const DEFAULT_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

/// MD5 of the canonical gzipped files, in `MNIST_FILES` order.
const DIGESTS: [&str; 4] = [
    "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "d53e105ee54ea40749a09fcbcd1e9432",
    "9fb629c4189551a2d022fa330f9573f3",
    "ec29112dd5afa0611ce80d1b7f02629c",
];

fn md5_hex(bytes: &[u8]) -> String {
    Md5::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn run(dir: &Path, mirror: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (stem, digest) in MNIST_FILES.iter().zip(DIGESTS) {
        let gz = dir.join(format!("{stem}.gz"));
        if gz.is_file() {
            let have = md5_hex(&fs::read(&gz).with_context(|| format!("reading {}", gz.display()))?);
            if have == digest {
                eprintln!("{}: present, checksum ok", gz.display());
                continue;
            }
            bail!("{}: checksum {have} does not match {digest}", gz.display());
        }
        if dir.join(stem).is_file() {
            eprintln!("{}: uncompressed copy present, not downloading", dir.join(stem).display());
            continue;
        }
        let url = format!("{}/{stem}.gz", mirror.trim_end_matches('/'));
        eprintln!("downloading {url}");
        let mut bytes = Vec::new();
        ureq::get(&url)
            .call()
            .with_context(|| format!("fetching {url}"))?
            .into_reader()
            .read_to_end(&mut bytes)
            .with_context(|| format!("reading {url}"))?;
        let have = md5_hex(&bytes);
        if have != digest {
            bail!("{url}: checksum {have} does not match {digest}");
        }
        fs::write(&gz, &bytes).with_context(|| format!("writing {}", gz.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn md5_known_vector() {
        assert_eq!(md5_hex(b""), "d41d8cd98f00b204e9800998ecf8427e");
        assert_eq!(md5_hex(b"abc"), "900150983cd24fb0d6963f7d28e17f72");
    }

    #[test]
    fn existing_file_with_wrong_digest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(format!("{}.gz", MNIST_FILES[0])), b"nope").unwrap();
        let err = run(dir.path(), "http://127.0.0.1:9/").unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }
}
