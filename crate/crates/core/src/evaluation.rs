//! Retrieval evaluation: feature extraction, distances, CMC / mAP and
//! k-reciprocal re-ranking.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_query_gallery, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::training::ImageSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    EuclideanOnNormalized,
    CosineDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > self.k2 && self.k2 >= 1) {
            return Err(Error::Config(format!(
                "rerank needs k1 > k2 >= 1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("rerank.lambda must be in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub metric: DistanceMetric,
    pub cross_camera_filter: bool,
    pub rerank: Option<RerankConfig>,
    pub max_rank: usize,
    pub batch_size: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            metric: DistanceMetric::EuclideanOnNormalized,
            cross_camera_filter: true,
            rerank: None,
            max_rank: 50,
            batch_size: 64,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.max_rank == 0 || self.batch_size == 0 {
            return Err(Error::Config("eval.max_rank and eval.batch_size must be >= 1".into()));
        }
        if let Some(r) = &self.rerank {
            r.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[r]` is the rank-`r+1` hit rate.
    pub cmc: Vec<f64>,
    pub num_query: usize,
    pub num_valid_queries: usize,
    /// AP of each valid query, in query order.
    pub per_query_ap: Vec<f64>,
    pub protocol: EvalProtocol,
}

impl EvalReport {
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc[r - 1]
    }
}

/// Eval-mode final features, one row per image in `set` order.
pub fn extract_features(model: &Model, set: &ImageSet, batch_size: usize) -> Result<Tensor> {
    let d = model.config.d_f;
    let mut out = Vec::with_capacity(set.len() * d);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = set.batch(chunk, None)?;
        out.extend_from_slice(model.embed(&batch)?.data());
    }
    Tensor::new(vec![set.len(), d], out)
}

fn normalized_rows(x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            let r = x.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// `q×g` distances between rows of `q` and `g`.
pub fn distance_matrix(q: &Tensor, g: &Tensor, metric: DistanceMetric) -> Result<Tensor> {
    if q.shape().len() != 2 || g.shape().len() != 2 || q.cols() != g.cols() {
        return Err(Error::shape("distance_matrix", q.shape(), g.shape()));
    }
    let (qn, gn) = (normalized_rows(q), normalized_rows(g));
    let rows: Vec<Vec<f64>> = qn
        .par_iter()
        .map(|a| {
            gn.iter()
                .map(|b| match metric {
                    DistanceMetric::EuclideanOnNormalized => {
                        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
                    }
                    DistanceMetric::CosineDistance => {
                        (1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).max(0.0)
                    }
                })
                .collect()
        })
        .collect();
    Tensor::new(vec![q.rows(), g.rows()], rows.concat())
}

/// Identity and camera labels of one side of the retrieval problem.
#[derive(Debug, Clone, Copy)]
pub struct Labels<'a> {
    pub ids: &'a [usize],
    pub cams: &'a [usize],
}

fn check_dims(d: &Tensor, q: Labels<'_>, g: Labels<'_>) -> Result<()> {
    let ok = d.shape().len() == 2
        && d.rows() == q.ids.len()
        && d.rows() == q.cams.len()
        && d.cols() == g.ids.len()
        && d.cols() == g.cams.len();
    if ok {
        Ok(())
    } else {
        Err(Error::shape("cmc_map", d.shape(), &[q.ids.len(), g.ids.len()]))
    }
}

/// Per-query AP and first-hit position (0-based) or `None` for a query
/// without valid relevant gallery items.
fn score_query(row: &[f64], qid: usize, qcam: usize, g: Labels<'_>, filter: bool) -> Option<(f64, usize)> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let mut pos = 0usize;
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut first = None;
    for j in order {
        let same_id = g.ids[j] == qid;
        if filter && same_id && g.cams[j] == qcam {
            continue;
        }
        pos += 1;
        if same_id {
            hits += 1;
            sum += hits as f64 / pos as f64;
            first.get_or_insert(pos - 1);
        }
    }
    first.map(|f| (sum / hits as f64, f))
}

fn report(results: Vec<Option<(f64, usize)>>, protocol: &EvalProtocol) -> Result<EvalReport> {
    let num_query = results.len();
    let valid: Vec<(f64, usize)> = results.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::invalid(format!(
            "none of the {num_query} queries has a valid relevant gallery item"
        )));
    }
    let n = valid.len() as f64;
    let mut cmc = vec![0.0; protocol.max_rank];
    for &(_, first) in &valid {
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
    }
    cmc.iter_mut().for_each(|c| *c /= n);
    let per_query_ap: Vec<f64> = valid.iter().map(|v| v.0).collect();
    Ok(EvalReport {
        map: per_query_ap.iter().sum::<f64>() / n,
        cmc,
        num_query,
        num_valid_queries: valid.len(),
        per_query_ap,
        protocol: protocol.clone(),
    })
}

/// CMC and mAP of distance matrix `d`. Gallery ties are broken by index;
/// with `cross_camera_filter` same-id same-camera gallery items are removed
/// per query. Queries left without a relevant item are excluded.
pub fn cmc_map(d: &Tensor, q: Labels<'_>, g: Labels<'_>, protocol: &EvalProtocol) -> Result<EvalReport> {
    check_dims(d, q, g)?;
    let results = (0..d.rows())
        .into_par_iter()
        .map(|i| score_query(d.row(i), q.ids[i], q.cams[i], g, protocol.cross_camera_filter))
        .collect();
    report(results, protocol)
}

/// Exhaustive CMC / mAP: each relevant item's rank is counted directly
/// instead of sorting. Used to cross-check [`cmc_map`].
pub fn cmc_map_bruteforce(d: &Tensor, q: Labels<'_>, g: Labels<'_>, protocol: &EvalProtocol) -> Result<EvalReport> {
    check_dims(d, q, g)?;
    let mut results = Vec::with_capacity(d.rows());
    for i in 0..d.rows() {
        let row = d.row(i);
        let kept = |j: usize| !(protocol.cross_camera_filter && g.ids[j] == q.ids[i] && g.cams[j] == q.cams[i]);
        let before = |a: usize, b: usize| row[a] < row[b] || (row[a] == row[b] && a < b);
        let relevant: Vec<usize> = (0..row.len()).filter(|&j| kept(j) && g.ids[j] == q.ids[i]).collect();
        if relevant.is_empty() {
            results.push(None);
            continue;
        }
        let mut ranks: Vec<(usize, usize)> = relevant
            .iter()
            .map(|&j| {
                let rank = (0..row.len()).filter(|&k| kept(k) && before(k, j)).count() + 1;
                let rel_upto = relevant.iter().filter(|&&k| k == j || before(k, j)).count();
                (rank, rel_upto)
            })
            .collect();
        ranks.sort_unstable();
        let ap = ranks.iter().map(|&(r, c)| c as f64 / r as f64).sum::<f64>() / relevant.len() as f64;
        results.push(Some((ap, ranks[0].0 - 1)));
    }
    report(results, protocol)
}

fn sym_block(d_qg: &Tensor, d_qq: &Tensor, d_gg: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (nq, ng) = (d_qg.rows(), d_qg.cols());
    if d_qq.shape() != [nq, nq] || d_gg.shape() != [ng, ng] {
        return Err(Error::shape("k_reciprocal_rerank", d_qq.shape(), d_gg.shape()));
    }
    let n = nq + ng;
    let mut full = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            full[i][j] = match (i < nq, j < nq) {
                (true, true) => d_qq.row(i)[j],
                (true, false) => d_qg.row(i)[j - nq],
                (false, true) => d_qg.row(j)[i - nq],
                (false, false) => d_gg.row(i - nq)[j - nq],
            };
        }
    }
    Ok(full)
}

/// Squared distances, each row divided by its maximum.
fn rerank_base(full: &[Vec<f64>]) -> Vec<Vec<f64>> {
    full.iter()
        .map(|r| {
            let sq: Vec<f64> = r.iter().map(|v| v * v).collect();
            let m = sq.iter().cloned().fold(0.0f64, f64::max);
            sq.iter().map(|v| if m > 0.0 { v / m } else { 0.0 }).collect()
        })
        .collect()
}

fn argsort(row: &[f64]) -> Vec<usize> {
    let mut o: Vec<usize> = (0..row.len()).collect();
    o.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    o
}

fn validate_rerank(ng: usize, cfg: &RerankConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.k1 >= ng {
        return Err(Error::invalid(format!(
            "rerank k1={} must be smaller than the gallery size {ng}",
            cfg.k1
        )));
    }
    Ok(())
}

/// k-reciprocal re-ranking of `d_qg`.
///
/// Neighbour structure and Jaccard distances are computed over the squared,
/// row-max-normalised joint distance matrix; the result blends the caller's
/// `d_qg` unchanged, so `lambda = 1` returns it exactly.
pub fn k_reciprocal_rerank(d_qg: &Tensor, d_qq: &Tensor, d_gg: &Tensor, cfg: &RerankConfig) -> Result<Tensor> {
    let (nq, ng) = (d_qg.rows(), d_qg.cols());
    validate_rerank(ng, cfg)?;
    if cfg.lambda == 1.0 {
        return Ok(d_qg.clone());
    }
    let full = sym_block(d_qg, d_qq, d_gg)?;
    let base = rerank_base(&full);
    let n = nq + ng;
    let rank: Vec<Vec<usize>> = base.par_iter().map(|r| argsort(r)).collect();
    let reciprocal = |i: usize, k: usize| -> Vec<usize> {
        rank[i][..=k].iter().copied().filter(|&c| rank[c][..=k].contains(&i)).collect()
    };
    let half = (cfg.k1 as f64 / 2.0).round() as usize;
    let v: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let r = reciprocal(i, cfg.k1);
            let mut expanded: BTreeSet<usize> = r.iter().copied().collect();
            for &c in &r {
                let rc = reciprocal(c, half);
                let common = rc.iter().filter(|x| r.contains(x)).count();
                if 3 * common > 2 * rc.len() {
                    expanded.extend(rc);
                }
            }
            let mut row = vec![0.0; n];
            let weights: Vec<(usize, f64)> = expanded.iter().map(|&j| (j, (-base[i][j]).exp())).collect();
            let total: f64 = weights.iter().map(|w| w.1).sum();
            for (j, w) in weights {
                row[j] = w / total;
            }
            row
        })
        .collect();
    let v: Vec<Vec<f64>> = if cfg.k2 > 1 {
        (0..n)
            .map(|i| {
                let mut acc = vec![0.0; n];
                for &nb in &rank[i][..cfg.k2] {
                    acc.iter_mut().zip(&v[nb]).for_each(|(a, b)| *a += b);
                }
                acc.iter_mut().for_each(|a| *a /= cfg.k2 as f64);
                acc
            })
            .collect()
    } else {
        v
    };
    // Inverted index over non-zero columns keeps the Jaccard step sparse.
    let inv: Vec<Vec<usize>> = (0..n).map(|c| (0..n).filter(|&r| v[r][c] != 0.0).collect()).collect();
    let mut out = Vec::with_capacity(nq * ng);
    for i in 0..nq {
        let mut tmin = vec![0.0; n];
        for c in (0..n).filter(|&c| v[i][c] != 0.0) {
            for &r in &inv[c] {
                tmin[r] += v[i][c].min(v[r][c]);
            }
        }
        for j in 0..ng {
            let t = tmin[nq + j];
            let jac = 1.0 - t / (2.0 - t);
            out.push(cfg.lambda * d_qg.row(i)[j] + (1.0 - cfg.lambda) * jac);
        }
    }
    Tensor::new(vec![nq, ng], out)
}

/// Step-by-step re-ranking written from the set definitions: reciprocal
/// sets by explicit membership tests, dense query expansion and Jaccard as
/// `1 − Σmin / Σmax`. Used to cross-check [`k_reciprocal_rerank`].
pub fn k_reciprocal_rerank_oracle(d_qg: &Tensor, d_qq: &Tensor, d_gg: &Tensor, cfg: &RerankConfig) -> Result<Tensor> {
    let (nq, ng) = (d_qg.rows(), d_qg.cols());
    validate_rerank(ng, cfg)?;
    let full = sym_block(d_qg, d_qq, d_gg)?;
    let base = rerank_base(&full);
    let n = nq + ng;
    // neighbours(i, k): the k+1 closest items to i, itself included.
    let neighbours = |i: usize, k: usize| -> BTreeSet<usize> {
        let mut items: Vec<(f64, usize)> = (0..n).map(|j| (base[i][j], j)).collect();
        items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        items.into_iter().take(k + 1).map(|x| x.1).collect()
    };
    let recip = |i: usize, k: usize| -> BTreeSet<usize> {
        neighbours(i, k).into_iter().filter(|&j| neighbours(j, k).contains(&i)).collect()
    };
    let half = (cfg.k1 as f64 / 2.0).round() as usize;
    let mut v = vec![vec![0.0; n]; n];
    for (i, vi) in v.iter_mut().enumerate() {
        let r = recip(i, cfg.k1);
        let mut set = r.clone();
        for &c in &r {
            let rc = recip(c, half);
            if 3 * rc.intersection(&r).count() > 2 * rc.len() {
                set.extend(rc.iter().copied());
            }
        }
        let z: f64 = set.iter().map(|&j| (-base[i][j]).exp()).sum();
        for &j in &set {
            vi[j] = (-base[i][j]).exp() / z;
        }
    }
    let mut qe = vec![vec![0.0; n]; n];
    for (i, qi) in qe.iter_mut().enumerate() {
        let nb: Vec<usize> = if cfg.k2 > 1 {
            let mut items: Vec<(f64, usize)> = (0..n).map(|j| (base[i][j], j)).collect();
            items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            items.into_iter().take(cfg.k2).map(|x| x.1).collect()
        } else {
            vec![i]
        };
        for c in 0..n {
            qi[c] = nb.iter().map(|&m| v[m][c]).sum::<f64>() / nb.len() as f64;
        }
    }
    let mut out = Vec::with_capacity(nq * ng);
    for i in 0..nq {
        for j in 0..ng {
            let (a, b) = (&qe[i], &qe[nq + j]);
            let smin: f64 = a.iter().zip(b).map(|(x, y)| x.min(*y)).sum();
            let smax: f64 = a.iter().zip(b).map(|(x, y)| x.max(*y)).sum();
            let jac = 1.0 - smin / smax;
            out.push(cfg.lambda * d_qg.row(i)[j] + (1.0 - cfg.lambda) * jac);
        }
    }
    Tensor::new(vec![nq, ng], out)
}

/// Features and labels of the query and gallery splits.
pub struct RetrievalFeatures {
    pub query: Tensor,
    pub gallery: Tensor,
    pub q_ids: Vec<usize>,
    pub q_cams: Vec<usize>,
    pub g_ids: Vec<usize>,
    pub g_cams: Vec<usize>,
}

pub fn retrieval_features(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<RetrievalFeatures> {
    let (query, gallery) = split_query_gallery(dataset)?;
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::invalid("dataset needs at least one query and one gallery sample"));
    }
    let (qset, _) = ImageSet::from_samples(dataset, &query)?;
    let (gset, _) = ImageSet::from_samples(dataset, &gallery)?;
    Ok(RetrievalFeatures {
        query: extract_features(model, &qset, batch_size)?,
        gallery: extract_features(model, &gset, batch_size)?,
        q_ids: query.iter().map(|s| s.id).collect(),
        q_cams: query.iter().map(|s| s.camera).collect(),
        g_ids: gallery.iter().map(|s| s.id).collect(),
        g_cams: gallery.iter().map(|s| s.camera).collect(),
    })
}

/// Distances under `protocol`, re-ranked when configured, then scored.
pub fn evaluate_features(f: &RetrievalFeatures, protocol: &EvalProtocol) -> Result<EvalReport> {
    protocol.validate()?;
    let mut d = distance_matrix(&f.query, &f.gallery, protocol.metric)?;
    if let Some(r) = &protocol.rerank {
        let d_qq = distance_matrix(&f.query, &f.query, protocol.metric)?;
        let d_gg = distance_matrix(&f.gallery, &f.gallery, protocol.metric)?;
        d = k_reciprocal_rerank(&d, &d_qq, &d_gg, r)?;
    }
    cmc_map(
        &d,
        Labels {
            ids: &f.q_ids,
            cams: &f.q_cams,
        },
        Labels {
            ids: &f.g_ids,
            cams: &f.g_cams,
        },
        protocol,
    )
}

pub fn evaluate(model: &Model, dataset: &Dataset, protocol: &EvalProtocol) -> Result<EvalReport> {
    protocol.validate()?;
    let f = retrieval_features(model, dataset, protocol.batch_size)?;
    evaluate_features(&f, protocol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub key: String,
    pub id: usize,
    pub camera: usize,
    pub embedding: Vec<f32>,
}

/// JSON-lines export; values are cast to `f32` and written in
/// shortest-round-trip form.
pub fn export_embeddings(features: &Tensor, keys: &[String], ids: &[usize], cams: &[usize], path: &Path) -> Result<()> {
    let m = features.rows();
    if keys.len() != m || ids.len() != m || cams.len() != m {
        return Err(Error::shape("export_embeddings", &[keys.len(), ids.len(), cams.len()], &[m]));
    }
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for i in 0..m {
        let rec = EmbeddingRecord {
            key: keys[i].clone(),
            id: ids[i],
            camera: cams[i],
            embedding: features.row(i).iter().map(|&v| v as f32).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
