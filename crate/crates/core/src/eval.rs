//! Single-query retrieval metrics: distances, ranking with the same-camera
//! junk rule, CMC and mean average precision.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::augment::resize_to_scales;
use crate::consensus::{ConsensusNet, Descriptor};
use crate::dataset::{PersonImageRecord, Source};
use crate::error::{Error, Result};
use crate::image::to_batch;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Meta {
    pub identity: u32,
    pub camera: u32,
}

impl From<&PersonImageRecord> for Meta {
    fn from(r: &PersonImageRecord) -> Self {
        Meta {
            identity: r.identity,
            camera: r.camera,
        }
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `n_q × n_g` Euclidean distances.
pub fn pairwise_distances(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = queries.first().or(gallery.first()).map_or(0, Vec::len);
    if let Some(bad) = queries.iter().chain(gallery).find(|v| v.len() != dim) {
        return Err(Error::Dimension(format!(
            "descriptor of length {} among length-{dim} descriptors",
            bad.len()
        )));
    }
    Ok(queries
        .iter()
        .map(|q| gallery.iter().map(|g| euclidean(q, g)).collect())
        .collect())
}

/// Gallery indices by ascending distance, ties by index, skipping entries that
/// share both identity and camera with the query.
pub fn rank_gallery(distances: &[f64], query: Meta, gallery: &[Meta]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&i| !(gallery[i].identity == query.identity && gallery[i].camera == query.camera))
        .collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

/// Mean of precision-at-k over the positions of relevant items; `None` when
/// nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (k + 1) as f64;
    }
    Some(sum / total as f64)
}

/// 1-based rank of the first relevant item.
pub fn first_match(relevant: &[bool]) -> Option<usize> {
    relevant.iter().position(|&r| r).map(|p| p + 1)
}

/// `cmc[k-1]` is the share of queries whose first match is at rank ≤ k.
pub fn cmc_curve(first_matches: &[usize], max_rank: usize) -> Vec<f64> {
    let mut counts = vec![0usize; max_rank];
    for &r in first_matches {
        if r >= 1 && r <= max_rank {
            counts[r - 1] += 1;
        }
    }
    let n = first_matches.len().max(1) as f64;
    let mut acc = 0;
    counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub index: usize,
    pub identity: u32,
    pub camera: u32,
    /// `None` for queries with no valid match.
    pub ap: Option<f64>,
    pub first_match: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub queries: Vec<QueryResult>,
    pub unanswerable: usize,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn rank(&self, k: usize) -> f64 {
        self.cmc
            .get(k.saturating_sub(1))
            .or(self.cmc.last())
            .copied()
            .unwrap_or(0.0)
    }

    pub fn answered(&self) -> usize {
        self.queries.len() - self.unanswerable
    }

    /// `query_index,identity,camera,ap,first_match`; unanswerable rows leave
    /// the last two fields empty.
    pub fn write_ap_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "query_index,identity,camera,ap,first_match")?;
        for q in &self.queries {
            let ap = q.ap.map(|v| format!("{v:.6}")).unwrap_or_default();
            let fm = q.first_match.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{ap},{fm}", q.index, q.identity, q.camera)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ranks every query against the gallery and aggregates CMC and mAP over the
/// queries that have at least one valid match.
pub fn evaluate_descriptors(
    queries: &[Vec<f64>],
    query_meta: &[Meta],
    gallery: &[Vec<f64>],
    gallery_meta: &[Meta],
) -> Result<EvalReport> {
    if queries.len() != query_meta.len() || gallery.len() != gallery_meta.len() {
        return Err(Error::Contract("descriptor and metadata counts differ".into()));
    }
    let dist = pairwise_distances(queries, gallery)?;
    let mut results = Vec::with_capacity(queries.len());
    let mut firsts = Vec::new();
    let mut aps = Vec::new();
    for (i, (row, &q)) in dist.iter().zip(query_meta).enumerate() {
        let ranking = rank_gallery(row, q, gallery_meta);
        let relevant: Vec<bool> = ranking
            .iter()
            .map(|&g| gallery_meta[g].identity == q.identity)
            .collect();
        let ap = average_precision(&relevant);
        let fm = first_match(&relevant);
        if let (Some(ap), Some(fm)) = (ap, fm) {
            aps.push(ap);
            firsts.push(fm);
        }
        results.push(QueryResult {
            index: i,
            identity: q.identity,
            camera: q.camera,
            ap,
            first_match: fm,
        });
    }
    let unanswerable = queries.len() - aps.len();
    if unanswerable > 0 {
        log::warn!("{unanswerable} queries have no valid gallery match and are excluded");
    }
    if aps.is_empty() {
        return Err(Error::Contract("no query has a valid gallery match".into()));
    }
    Ok(EvalReport {
        cmc: cmc_curve(&firsts, gallery.len()),
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        queries: results,
        unanswerable,
    })
}

/// Descriptors for `records`, resized to every branch scale, no augmentation.
pub fn embed_records<E: Element>(
    net: &ConsensusNet<E>,
    records: &[PersonImageRecord],
    batch_size: usize,
) -> Result<Vec<Descriptor>> {
    let scales = &net.config.scales;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let resized: Vec<Vec<_>> = chunk
            .iter()
            .map(|r| resize_to_scales(&r.image, scales))
            .collect();
        let batches = (0..scales.len())
            .map(|s| to_batch::<E>(&resized.iter().map(|v| &v[s]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        out.extend(net.extract_embeddings(&batches)?);
    }
    Ok(out)
}

fn values(descriptors: Vec<Descriptor>) -> Vec<Vec<f64>> {
    descriptors.into_iter().map(|d| d.values).collect()
}

pub fn evaluate<E: Element>(
    net: &ConsensusNet<E>,
    query: &[PersonImageRecord],
    gallery: &[PersonImageRecord],
    batch_size: usize,
) -> Result<EvalReport> {
    let q = values(embed_records(net, query, batch_size)?);
    let g = values(embed_records(net, gallery, batch_size)?);
    let qm: Vec<Meta> = query.iter().map(Meta::from).collect();
    let gm: Vec<Meta> = gallery.iter().map(Meta::from).collect();
    evaluate_descriptors(&q, &qm, &g, &gm)
}

/// Sidecar CSV next to an embedding file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".csv");
    PathBuf::from(s)
}

/// Writes `u64 count, u64 dim` then `f32` rows (all little-endian), plus a
/// sidecar CSV `index,identity,camera,path`.
pub fn write_embeddings(path: &Path, descriptors: &[Descriptor], records: &[PersonImageRecord]) -> Result<()> {
    if descriptors.len() != records.len() {
        return Err(Error::Contract("descriptor and record counts differ".into()));
    }
    let dim = descriptors.first().map_or(0, |d| d.values.len());
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(descriptors.len() as u64).to_le_bytes())?;
    w.write_all(&(dim as u64).to_le_bytes())?;
    for d in descriptors {
        if d.values.len() != dim {
            return Err(Error::Dimension("descriptors of different lengths".into()));
        }
        for &v in &d.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    let mut csv = BufWriter::new(fs::File::create(sidecar_path(path))?);
    writeln!(csv, "index,identity,camera,path")?;
    for (i, r) in records.iter().enumerate() {
        let src = match &r.source {
            Source::File(p) => p.display().to_string(),
            Source::Synthetic { seed } => format!("synthetic:{seed}"),
        };
        writeln!(csv, "{i},{},{},{src}", r.identity, r.camera)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<Vec<f32>>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let load_err = |reason: &str| Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 16 {
        return Err(load_err("truncated header"));
    }
    let count = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + count * dim * 4 {
        return Err(load_err("size does not match header"));
    }
    Ok(bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>()
        .chunks(dim.max(1))
        .take(count)
        .map(<[f32]>::to_vec)
        .collect())
}
