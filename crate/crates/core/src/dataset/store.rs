use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{sha256_hex, sphere_path, Dataset, DatasetManifest, ManifestHeader, SampleRecord, MANIFEST_FORMAT};
use crate::error::{Error, Result};
use crate::material::MaterialSpec;
use crate::renderer::{Mask, Raster};

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_checked(path: &Path, sha256: &str) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let got = sha256_hex(&bytes);
    if got != sha256 {
        return Err(Error::format(path, format!("checksum mismatch: manifest has {sha256}, file has {got}")));
    }
    Ok(bytes)
}

/// Write the header, gallery, sample lines and every raster under `dir`.
pub fn save_manifest(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    let m = &dataset.manifest;
    for sub in ["images", "masks", "spheres"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    write(&dir.join("header.json"), &serde_json::to_vec_pretty(&m.header)?)?;
    write(&dir.join(&m.header.gallery), &serde_json::to_vec_pretty(&m.gallery)?)?;
    let mut lines = Vec::new();
    for s in &m.samples {
        serde_json::to_writer(&mut lines, s)?;
        lines.write_all(b"\n").expect("in-memory write");
    }
    write(&dir.join("manifest.jsonl"), &lines)?;
    for ((s, img), mask) in m.samples.iter().zip(&dataset.images).zip(&dataset.masks) {
        write(&dir.join(&s.image), &img.encode_ppm()?)?;
        write(&dir.join(&s.mask), &mask.encode_pgm()?)?;
    }
    for (spec, sw) in m.gallery.iter().zip(&dataset.swatches) {
        write(&dir.join(sphere_path(&spec.id)), &sw.encode_ppm()?)?;
    }
    Ok(())
}

/// Only the gallery of a dataset directory, found through its header.
pub fn load_gallery(dir: &Path) -> Result<Vec<MaterialSpec>> {
    let header_path = dir.join("header.json");
    let header: ManifestHeader =
        serde_json::from_slice(&read(&header_path)?).map_err(|e| Error::format(&header_path, e.to_string()))?;
    let gallery_path = dir.join(&header.gallery);
    serde_json::from_slice(&read(&gallery_path)?).map_err(|e| Error::format(&gallery_path, e.to_string()))
}

/// Load a dataset written by [`save_manifest`], verifying every file's
/// checksum. Errors name the offending file.
pub fn load_manifest(dir: &Path) -> Result<Dataset> {
    let header_path = dir.join("header.json");
    let header: ManifestHeader =
        serde_json::from_slice(&read(&header_path)?).map_err(|e| Error::format(&header_path, e.to_string()))?;
    if header.format != MANIFEST_FORMAT {
        return Err(Error::format(&header_path, format!("unsupported manifest format {}", header.format)));
    }
    let gallery_path = dir.join(&header.gallery);
    let gallery: Vec<MaterialSpec> =
        serde_json::from_slice(&read(&gallery_path)?).map_err(|e| Error::format(&gallery_path, e.to_string()))?;
    let lines_path = dir.join("manifest.jsonl");
    let text = String::from_utf8(read(&lines_path)?).map_err(|_| Error::format(&lines_path, "not UTF-8"))?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: SampleRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(&lines_path, format!("line {}: {e}", n + 1)))?;
        samples.push(rec);
    }
    if samples.len() != header.n_samples {
        return Err(Error::format(
            &lines_path,
            format!("header announces {} samples, found {}", header.n_samples, samples.len()),
        ));
    }
    let mut images = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in &samples {
        let p = dir.join(&s.image);
        images.push(Raster::decode_image(&read_checked(&p, &s.image_sha256)?).map_err(|e| Error::format(&p, e.to_string()))?);
        let p = dir.join(&s.mask);
        masks.push(Mask::decode(&read_checked(&p, &s.mask_sha256)?).map_err(|e| Error::format(&p, e.to_string()))?);
    }
    let mut swatches = Vec::with_capacity(gallery.len());
    for spec in &gallery {
        let p = dir.join(sphere_path(&spec.id));
        let sha = header
            .spheres
            .get(&spec.id)
            .ok_or_else(|| Error::format(&header_path, format!("no swatch checksum for {}", spec.id)))?;
        swatches.push(Raster::decode_image(&read_checked(&p, sha)?).map_err(|e| Error::format(&p, e.to_string()))?);
    }
    let ds = Dataset { manifest: DatasetManifest { header, gallery, samples }, images, masks, swatches };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::super::{build_synthetic, RenderConfig};
    use super::*;
    use crate::material::sample_gallery;
    use crate::renderer::Shape;

    fn small() -> Dataset {
        build_synthetic(&sample_gallery(3, 2, "s"), &Shape::default_set(2), 2, &RenderConfig::default()).unwrap()
    }

    #[test]
    fn round_trip() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&ds, dir.path()).unwrap();
        assert_eq!(load_manifest(dir.path()).unwrap(), ds);
    }

    #[test]
    fn missing_raster_is_named() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&ds, dir.path()).unwrap();
        let victim = &ds.manifest.samples[1].image;
        fs::remove_file(dir.path().join(victim)).unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        assert!(err.to_string().contains(victim.as_str()), "{err}");
    }

    #[test]
    fn corrupt_raster_is_named() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&ds, dir.path()).unwrap();
        let victim = &ds.manifest.samples[0].mask;
        let p = dir.path().join(victim);
        let mut bytes = fs::read(&p).unwrap();
        *bytes.last_mut().unwrap() ^= 0xff;
        fs::write(&p, bytes).unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        assert!(err.to_string().contains(victim.as_str()) && err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn empty_manifest_round_trips() {
        let mut ds = small();
        ds.manifest.samples.clear();
        ds.manifest.header.n_samples = 0;
        ds.images.clear();
        ds.masks.clear();
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&ds, dir.path()).unwrap();
        let back = load_manifest(dir.path()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back, ds);
    }
}
