//! CSV outputs: loss log, metrics, embeddings and the ablation table.

use std::path::Path;

use rottrans_core::eval::RankingMetrics;
use rottrans_core::train::{EpochLog, Variant};
use rottrans_core::{Scalar, Tensor};

use crate::error::{AppError, AppResult};

fn writer(path: &Path) -> AppResult<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> AppError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::io(path, io),
        other => AppError::Data(format!("{}: {other:?}", path.display())),
    }
}

fn finish(path: &Path, mut w: csv::Writer<std::fs::File>) -> AppResult<()> {
    w.flush().map_err(|e| AppError::io(path, e))
}

pub const LOSS_HEADER: [&str; 6] = ["epoch", "l_ori", "l_rot", "l_inv", "total", "lr"];

pub fn write_loss_log(path: &Path, logs: &[EpochLog]) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(LOSS_HEADER).map_err(|e| csv_err(path, e))?;
    for l in logs {
        w.serialize((l.epoch, l.l_ori, l.l_rot, l.l_inv, l.total, l.lr))
            .map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

/// Periodic retrieval results: `epoch,rank1,map,minp`.
pub fn write_eval_log(path: &Path, logs: &[EpochLog]) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(["epoch", "rank1", "map", "minp"]).map_err(|e| csv_err(path, e))?;
    for l in logs {
        if let Some(m) = &l.metrics {
            w.serialize((l.epoch, m.rank(1), m.map, m.minp)).map_err(|e| csv_err(path, e))?;
        }
    }
    finish(path, w)
}

/// `metric,value` rows followed by one `cmc_k,value` row per rank.
pub fn metrics_csv(m: &RankingMetrics) -> String {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("map,{}\nminp,{}\nnum_valid_queries,{}\n", m.map, m.minp, m.num_valid_queries));
    for (k, v) in m.cmc.iter().enumerate() {
        out.push_str(&format!("cmc_{},{}\n", k + 1, v));
    }
    out
}

pub fn write_metrics(path: &Path, m: &RankingMetrics) -> AppResult<()> {
    std::fs::write(path, metrics_csv(m)).map_err(|e| AppError::io(path, e))
}

/// `identity,f0,…,f{D−1}`, one row per embedding.
pub fn write_embeddings<F: Scalar>(path: &Path, feats: &Tensor<F>, ids: &[u32]) -> AppResult<()> {
    let d = feats.shape().get(1).copied().unwrap_or(0);
    if feats.shape().first() != Some(&ids.len()) {
        return Err(AppError::Data(format!(
            "{} identities for embeddings of shape {:?}",
            ids.len(),
            feats.shape()
        )));
    }
    let mut w = writer(path)?;
    let mut header = vec!["identity".to_string()];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (row, id) in ids.iter().enumerate() {
        let mut rec = vec![id.to_string()];
        rec.extend(feats.data()[row * d..(row + 1) * d].iter().map(|v| format!("{:.8e}", v.to_f64())));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

/// Reads an embedding dump back as `(identities, rows)`.
pub fn read_embeddings(path: &Path) -> AppResult<(Vec<u32>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |s: &str| AppError::Data(format!("{}: bad value `{s}`", path.display()));
        let mut it = rec.iter();
        let id = it.next().unwrap_or("");
        ids.push(id.parse().map_err(|_| bad(id))?);
        rows.push(it.map(|s| s.parse().map_err(|_| bad(s))).collect::<AppResult<Vec<f64>>>()?);
    }
    Ok((ids, rows))
}

/// One trained variant on one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: RankingMetrics,
    pub param_count: usize,
    pub seconds: f64,
}

pub const COMPARISON_HEADER: [&str; 10] = [
    "variant", "name", "seed", "rank1", "rank5", "rank10", "map", "minp", "params", "seconds",
];

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> AppResult<()> {
    let mut w = writer(path)?;
    w.write_record(COMPARISON_HEADER).map_err(|e| csv_err(path, e))?;
    for r in rows {
        let m = &r.metrics;
        let at = |k: usize| m.cmc.get(k - 1).copied().unwrap_or(1.0);
        w.serialize((
            r.variant.letter().to_string(),
            r.variant.name(),
            r.seed,
            at(1),
            at(5),
            at(10),
            m.map,
            m.minp,
            r.param_count,
            format!("{:.1}", r.seconds),
        ))
        .map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

/// Per-variant means over seeds: `(variant, mean rank-1, mean mAP, mean mINP)`.
pub fn summarize(rows: &[ComparisonRow]) -> Vec<(Variant, f64, f64, f64)> {
    let mut out = Vec::new();
    for v in Variant::ALL {
        let sel: Vec<_> = rows.iter().filter(|r| r.variant == v).collect();
        if sel.is_empty() {
            continue;
        }
        let n = sel.len() as f64;
        let mean = |f: &dyn Fn(&RankingMetrics) -> f64| sel.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        out.push((v, mean(&|m| m.rank(1)), mean(&|m| m.map), mean(&|m| m.minp)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_round_trip_and_empty_dump() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let feats = Tensor::new([3, 2], vec![0.123456789f64, -2.0, 1e-7, 3.5, 42.0, -0.0001]).unwrap();
        write_embeddings(&p, &feats, &[4, 4, 9]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("identity,f0,f1\n"));
        let (ids, rows) = read_embeddings(&p).unwrap();
        assert_eq!(ids, vec![4, 4, 9]);
        for (row, orig) in rows.iter().flatten().zip(feats.data()) {
            assert!((row - orig).abs() <= 1e-6 * orig.abs());
        }
        write_embeddings(&p, &Tensor::<f32>::zeros([0, 5]), &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1);
    }

    #[test]
    fn metrics_layout() {
        let m = RankingMetrics {
            cmc: vec![0.5, 1.0],
            map: 0.75,
            minp: 0.5,
            num_valid_queries: 2,
        };
        assert_eq!(
            metrics_csv(&m),
            "metric,value\nmap,0.75\nminp,0.5\nnum_valid_queries,2\ncmc_1,0.5\ncmc_2,1\n"
        );
    }
}
