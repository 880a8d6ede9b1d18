//! On-disk datasets: a `manifest.csv` plus P6 images at the listed paths.

use std::io::Write;
use std::path::Path;

use rottrans_core::data::{DatasetManifest, ManifestRecord, Split, SynthDataset};
use rottrans_core::train::ImageSet;
use rottrans_core::Scalar;

use crate::error::{AppError, AppResult};
use crate::ppm;

pub const MANIFEST_FILE: &str = "manifest.csv";

fn join3(v: &[f64; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

/// Serializes a manifest: stats comment, header, one row per record, LF endings.
pub fn manifest_to_string(m: &DatasetManifest) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["path", "identity", "camera", "split"]).expect("in-memory");
    for r in &m.records {
        w.serialize((&r.path, r.identity, r.camera, r.split.as_str())).expect("in-memory");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8");
    format!("# mean={} std={}\n{body}", join3(&m.mean), join3(&m.std))
}

fn parse_stats(line: &str, lineno: usize) -> AppResult<([f64; 3], [f64; 3])> {
    let bad = || AppError::Data(format!("manifest line {lineno}: malformed stats comment `{line}`"));
    let triple = |s: &str| -> Option<[f64; 3]> {
        let v: Vec<f64> = s.split(',').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
        v.try_into().ok()
    };
    let rest = line.trim_start_matches('#').trim();
    let (mean, std) = rest.split_once(' ').ok_or_else(bad)?;
    let mean = triple(mean.strip_prefix("mean=").ok_or_else(bad)?).ok_or_else(bad)?;
    let std = triple(std.trim().strip_prefix("std=").ok_or_else(bad)?).ok_or_else(bad)?;
    Ok((mean, std))
}

/// Parses and validates a manifest.
pub fn parse_manifest(text: &str) -> AppResult<DatasetManifest> {
    let mut stats = None;
    let mut body = String::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim_start().starts_with('#') {
            if line.contains("mean=") {
                stats = Some(parse_stats(line, i + 1)?);
            }
            body.push('\n');
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    let (mean, std) = stats.ok_or_else(|| AppError::Data("manifest has no `# mean=… std=…` line".into()))?;
    let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let header = rdr.headers().map_err(|e| AppError::Data(format!("manifest header: {e}")))?;
    if header != vec!["path", "identity", "camera", "split"] {
        return Err(AppError::Data(format!(
            "manifest header must be `path,identity,camera,split`, got `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| AppError::Data(format!("manifest: {e}")))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("");
        let num = |i: usize, what: &str| -> AppResult<u32> {
            field(i)
                .parse()
                .map_err(|_| AppError::Data(format!("manifest line {line}: bad {what} `{}`", field(i))))
        };
        let split = Split::parse(field(3))
            .ok_or_else(|| AppError::Data(format!("manifest line {line}: unknown split `{}`", field(3))))?;
        records.push(ManifestRecord {
            path: field(0).to_string(),
            identity: num(1, "identity")?,
            camera: num(2, "camera")?,
            split,
        });
    }
    let m = DatasetManifest { records, mean, std };
    m.validate()?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> AppResult<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
    parse_manifest(&text).map_err(|e| match e {
        AppError::Data(m) => AppError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes every image and the manifest under `dir`.
pub fn write_dataset(dir: &Path, data: &SynthDataset) -> AppResult<()> {
    for split in [Split::Train, Split::Query, Split::Gallery] {
        let sub = dir.join(split.as_str());
        std::fs::create_dir_all(&sub).map_err(|e| AppError::io(&sub, e))?;
    }
    for (rec, img) in data.manifest.records.iter().zip(&data.images) {
        ppm::write(&dir.join(&rec.path), img)?;
    }
    let path = dir.join(MANIFEST_FILE);
    let mut f = std::fs::File::create(&path).map_err(|e| AppError::io(&path, e))?;
    f.write_all(manifest_to_string(&data.manifest).as_bytes())
        .map_err(|e| AppError::io(&path, e))
}

/// Loads the manifest and every image it lists.
pub fn load_image_set<F: Scalar>(dir: &Path) -> AppResult<ImageSet<F>> {
    let manifest = read_manifest(dir)?;
    let images = manifest
        .records
        .iter()
        .map(|r| ppm::load_image(&dir.join(&r.path)))
        .collect::<AppResult<Vec<_>>>()?;
    Ok(ImageSet::new(manifest, images)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "# mean=0.5,0.25,0.125 std=0.1,0.2,0.3\npath,identity,camera,split\ntrain/a.ppm,0,0,train\ntrain/b.ppm,0,1,train\nquery/c.ppm,7,0,query\ngallery/d.ppm,7,1,gallery\n";

    #[test]
    fn manifest_round_trip_is_byte_exact() {
        let m = parse_manifest(TEXT).unwrap();
        assert_eq!(m.records.len(), 4);
        assert_eq!(m.mean, [0.5, 0.25, 0.125]);
        assert_eq!(m.records[2].split, Split::Query);
        assert_eq!(manifest_to_string(&m), TEXT);
    }

    #[test]
    fn bad_rows_name_the_line() {
        let bad = TEXT.replace("7,1,gallery", "7,1,galery");
        let e = parse_manifest(&bad).unwrap_err().to_string();
        assert!(e.contains("line 6") && e.contains("galery"), "{e}");
        let no_stats = TEXT.lines().skip(1).collect::<Vec<_>>().join("\n");
        assert!(parse_manifest(&no_stats).is_err());
    }

    #[test]
    fn invalid_protocol_is_rejected_on_load() {
        let bad = TEXT.replace("gallery/d.ppm,7,1", "gallery/d.ppm,7,0");
        assert!(parse_manifest(&bad).is_err());
    }
}
