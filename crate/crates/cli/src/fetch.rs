//! Downloading and inspecting dataset files.

use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context};
use gprop_core::dataset::{self, GlassDataset, DEFAULT_SPLIT_RATIOS};

pub const UCI_GLASS_URL: &str = "https://archive.ics.uci.edu/ml/machine-learning-databases/glass/glass.data";

/// Downloads `url`, checks that it parses, writes it to `out` and returns
/// its checksum.
pub fn fetch(url: &str, out: &Path) -> anyhow::Result<String> {
    let http = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()?;
    let resp = http.get(url).send().with_context(|| format!("downloading {url}"))?;
    if !resp.status().is_success() {
        bail!("{url} answered {}", resp.status());
    }
    let text = resp.text()?;
    dataset::parse_uci_glass(&text).context("downloaded file is not a glass data file")?;
    std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    Ok(dataset::sha256_hex(text.as_bytes()))
}

/// Human-readable summary of a dataset and its split under `split_seed`.
pub fn inspect(path: Option<&Path>, split_seed: u64) -> anyhow::Result<String> {
    let (checksum, ds) = dataset::load_named(dataset::GLASS_NAME, path)?;
    let split = ds.split(split_seed, DEFAULT_SPLIT_RATIOS)?;
    Ok(describe(&ds, &checksum, split_seed, [split.train.len(), split.validation.len(), split.test.len()]))
}

fn describe(ds: &GlassDataset, checksum: &str, seed: u64, sizes: [usize; 3]) -> String {
    let counts: Vec<String> = ds
        .class_labels
        .iter()
        .zip(ds.class_counts())
        .map(|(label, n)| format!("{label}:{n}"))
        .collect();
    format!(
        "samples   {}\nfeatures  {}\nclasses   {} ({})\nsha256    {checksum}\nsplit     seed {seed}: train {} / validation {} / test {}\n",
        ds.samples.len(),
        ds.n_features(),
        ds.n_classes(),
        counts.join(" "),
        sizes[0],
        sizes[1],
        sizes[2],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};

    #[test]
    fn inspect_vendored_copy() {
        let text = inspect(None, 3).unwrap();
        assert!(text.contains("samples   214\n"), "{text}");
        assert!(text.contains("features  9\n"));
        assert!(text.contains("train 107 / validation 54 / test 53"));
        assert!(text.contains(&dataset::glass_checksum()));
    }

    fn serve_once(body: String, status: &'static str) -> String {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut buf = [0u8; 4096];
            let _ = s.read(&mut buf);
            let head = format!("HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len());
            s.write_all(head.as_bytes()).unwrap();
            s.write_all(body.as_bytes()).unwrap();
        });
        format!("http://{addr}/glass.data")
    }

    #[test]
    fn fetch_writes_verified_copy() {
        let original = dataset::load_named("glass", None).unwrap().1.to_uci_text();
        let url = serve_once(original.clone(), "200 OK");
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("glass.data");
        let sum = fetch(&url, &out).unwrap();
        assert_eq!(std::fs::read_to_string(&out).unwrap(), original);
        assert_eq!(sum, dataset::sha256_hex(original.as_bytes()));
    }

    #[test]
    fn fetch_rejects_garbage_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x");
        assert!(fetch(&serve_once("<html>nope</html>".into(), "200 OK"), &out).is_err());
        assert!(fetch(&serve_once(String::new(), "404 Not Found"), &out).is_err());
        assert!(!out.exists());
    }
}
