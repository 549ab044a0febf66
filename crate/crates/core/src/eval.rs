//! Retrieval metrics, single-shot split protocols, classification accuracy
//! and latent-space probes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic_blobs, MultiDomainDataset};
use crate::error::{Error, Result};
use crate::model::{Component, ModelBundle};
use crate::tensor::Tensor;

/// Ranks reported in every [`MetricReport`].
pub const REPORTED_RANKS: [usize; 4] = [1, 5, 10, 20];
/// Neighbours used by the latent probes.
pub const PROBE_K: usize = 15;
pub const THREADS_ENV: &str = "DIR_LEARN_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rank_k: BTreeMap<usize, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
}

impl MetricReport {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.rank_k.get(&k).copied()
    }
}

/// Full CMC curve and mAP of one ranking problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    /// `cmc[k - 1]` is the rank-k accuracy, for `k` up to the gallery size.
    pub cmc: Vec<f64>,
    pub ap: Vec<f64>,
    pub map: f64,
}

impl Retrieval {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            rank_k: REPORTED_RANKS.iter().map(|&k| (k, self.rank(k))).collect(),
            map: self.map,
        }
    }
}

/// Gallery order for one probe: ascending distance, ties by gallery index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

/// CMC and mAP from a `[P, G]` distance matrix.
pub fn cmc_map(distances: &Tensor, probe_ids: &[usize], gallery_ids: &[usize]) -> Result<Retrieval> {
    let [p, g] = distances.shape()[..] else {
        return Err(Error::Contract(format!("distances must be [P, G], got {:?}", distances.shape())));
    };
    if probe_ids.len() != p {
        return Err(Error::dim("cmc_map", "probe ids", p, probe_ids.len()));
    }
    if gallery_ids.len() != g {
        return Err(Error::dim("cmc_map", "gallery ids", g, gallery_ids.len()));
    }
    if p == 0 || g == 0 {
        return Err(Error::Protocol("empty probe or gallery set".into()));
    }
    if distances.data().iter().any(|d| !d.is_finite()) {
        return Err(Error::Contract("distances must be finite".into()));
    }
    let mut first_hit = vec![0usize; g];
    let mut ap = Vec::with_capacity(p);
    for (i, &pid) in probe_ids.iter().enumerate() {
        let order = ranking(distances.row(i));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (rank, &j) in order.iter().enumerate() {
            if gallery_ids[j] == pid {
                hits += 1;
                precision_sum += hits as f64 / (rank + 1) as f64;
                first.get_or_insert(rank);
            }
        }
        let Some(first) = first else {
            return Err(Error::Protocol(format!("probe {i} (identity {pid}) has no true match in the gallery")));
        };
        first_hit[first] += 1;
        ap.push(precision_sum / hits as f64);
    }
    let mut cmc = Vec::with_capacity(g);
    let mut acc = 0usize;
    for h in first_hit {
        acc += h;
        cmc.push(acc as f64 / p as f64);
    }
    let map = ap.iter().sum::<f64>() / p as f64;
    Ok(Retrieval { cmc, ap, map })
}

/// Pairwise Euclidean distances between the rows of `a` `[P, d]` and `b` `[G, d]`.
pub fn euclidean_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (da, db) = (a.shape()[1..].iter().product::<usize>(), b.shape()[1..].iter().product::<usize>());
    if da != db {
        return Err(Error::dim("euclidean_distances", "embedding width", da, db));
    }
    let (p, g) = (a.shape()[0], b.shape()[0]);
    let mut out = Vec::with_capacity(p * g);
    for i in 0..p {
        let x = a.row(i);
        for j in 0..g {
            let d2: f64 = x.iter().zip(b.row(j)).map(|(u, v)| (u - v) * (u - v)).sum();
            out.push(d2.sqrt());
        }
    }
    Tensor::new(vec![p, g], out)
}

/// Minimum of per-dataset rank-1 accuracies.
pub fn wda(rank1: &[f64]) -> Result<f64> {
    rank1
        .iter()
        .copied()
        .reduce(f64::min)
        .ok_or_else(|| Error::Protocol("worst-domain accuracy of no datasets".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Grid,
    Ilids,
    Prid,
    Viper,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [Protocol::Viper, Protocol::Prid, Protocol::Grid, Protocol::Ilids];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Grid => "grid",
            Protocol::Ilids => "ilids",
            Protocol::Prid => "prid",
            Protocol::Viper => "viper",
        }
    }

    /// Probe and gallery sizes of one split on the reference pool.
    pub fn table_sizes(self) -> (usize, usize) {
        match self {
            Protocol::Grid => (125, 1025),
            Protocol::Ilids => (60, 60),
            Protocol::Prid => (100, 649),
            Protocol::Viper => (316, 316),
        }
    }

    /// Identities seen in both views, only in view A, only in view B.
    pub fn reference_pool_counts(self) -> (usize, usize, usize) {
        match self {
            Protocol::Grid => (250, 0, 775),
            Protocol::Ilids => (300, 0, 0),
            Protocol::Prid => (200, 185, 549),
            Protocol::Viper => (632, 0, 0),
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config("protocol", format!("unknown protocol `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolItem {
    pub identity: usize,
    pub view: View,
}

/// Images of a two-view identity pool. Item indices address the images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdPool {
    pub items: Vec<PoolItem>,
}

impl IdPool {
    /// `paired` identities in both views, then `a_only`, then `b_only`.
    pub fn with_counts(paired: usize, a_only: usize, b_only: usize) -> Self {
        let mut items = Vec::with_capacity(2 * paired + a_only + b_only);
        for id in 0..paired {
            items.push(PoolItem { identity: id, view: View::A });
            items.push(PoolItem { identity: id, view: View::B });
        }
        for id in paired..paired + a_only {
            items.push(PoolItem { identity: id, view: View::A });
        }
        for id in paired + a_only..paired + a_only + b_only {
            items.push(PoolItem { identity: id, view: View::B });
        }
        IdPool { items }
    }

    /// Pool with the published structure of `protocol`.
    pub fn reference(protocol: Protocol) -> Self {
        let (p, a, b) = protocol.reference_pool_counts();
        Self::with_counts(p, a, b)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.items.iter().map(|i| i.identity + 1).max().unwrap_or(0)
    }

    /// Per identity: item index in view A and in view B.
    fn views(&self) -> Result<BTreeMap<usize, (Option<usize>, Option<usize>)>> {
        let mut m: BTreeMap<usize, (Option<usize>, Option<usize>)> = BTreeMap::new();
        for (idx, it) in self.items.iter().enumerate() {
            let e = m.entry(it.identity).or_default();
            let slot = match it.view {
                View::A => &mut e.0,
                View::B => &mut e.1,
            };
            if slot.replace(idx).is_some() {
                return Err(Error::Protocol(format!(
                    "identity {} has more than one image in view {:?}",
                    it.identity, it.view
                )));
            }
        }
        Ok(m)
    }

    /// Renders every item as a glyph: view A and view B are two styles.
    pub fn synthetic_images(&self, image_size: usize, seed: u64) -> Result<Tensor> {
        let ids = self.num_identities().max(2);
        let ds = make_synthetic_blobs(2, ids, 1, image_size, seed)?;
        let n = image_size * image_size;
        let mut data = Vec::with_capacity(self.len() * n);
        for it in &self.items {
            let d = match it.view {
                View::A => 0,
                View::B => 1,
            };
            data.extend_from_slice(ds.image(d * ids + it.identity));
        }
        Tensor::new(vec![self.len(), 1, image_size, image_size], data)
    }
}

/// Probe and gallery as `(item index, identity)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalSplit {
    pub probe: Vec<(usize, usize)>,
    pub gallery: Vec<(usize, usize)>,
}

fn too_small(protocol: Protocol, what: &str, needed: usize, have: usize) -> Error {
    Error::Protocol(format!(
        "{} split needs {needed} {what}, pool has {have}",
        protocol.as_str()
    ))
}

/// One random single-shot split. Galleries are shuffled.
pub fn make_split<R: Rng>(protocol: Protocol, pool: &IdPool, rng: &mut R) -> Result<RetrievalSplit> {
    let views = pool.views()?;
    let paired: Vec<(usize, usize, usize)> = views
        .iter()
        .filter_map(|(&id, v)| match v {
            (Some(a), Some(b)) => Some((id, *a, *b)),
            _ => None,
        })
        .collect();
    let b_only: Vec<(usize, usize)> = views
        .iter()
        .filter_map(|(&id, v)| match v {
            (None, Some(b)) => Some((*b, id)),
            _ => None,
        })
        .collect();
    let pick = |n: usize, rng: &mut R| -> Result<Vec<(usize, usize, usize)>> {
        if paired.len() < n {
            return Err(too_small(protocol, "identities seen in both views", n, paired.len()));
        }
        Ok(paired.choose_multiple(rng, n).copied().collect())
    };
    let (probe, mut gallery): (Vec<(usize, usize)>, Vec<(usize, usize)>) = match protocol {
        Protocol::Grid => {
            let chosen = pick(125, rng)?;
            let probe = chosen.iter().map(|&(id, a, _)| (a, id)).collect();
            let gallery = paired.iter().map(|&(id, _, b)| (b, id)).chain(b_only.iter().copied()).collect();
            (probe, gallery)
        }
        Protocol::Ilids => {
            let chosen = pick(60, rng)?;
            let mut probe = Vec::with_capacity(60);
            let mut gallery = Vec::with_capacity(60);
            for (id, a, b) in chosen {
                let (p, g) = if rng.gen::<bool>() { (a, b) } else { (b, a) };
                probe.push((p, id));
                gallery.push((g, id));
            }
            (probe, gallery)
        }
        Protocol::Prid => {
            if paired.len() <= 100 {
                return Err(too_small(protocol, "identities seen in both views", 101, paired.len()));
            }
            let removed: BTreeSet<usize> = paired.choose_multiple(rng, 100).map(|&(id, _, _)| id).collect();
            let probe = paired
                .iter()
                .filter(|(id, _, _)| !removed.contains(id))
                .map(|&(id, a, _)| (a, id))
                .collect();
            let gallery = paired
                .iter()
                .filter(|(id, _, _)| !removed.contains(id))
                .map(|&(id, _, b)| (b, id))
                .chain(b_only.iter().copied())
                .collect();
            (probe, gallery)
        }
        Protocol::Viper => {
            let half = paired.len() / 2;
            if half == 0 {
                return Err(too_small(protocol, "identities seen in both views", 2, paired.len()));
            }
            let chosen = pick(half, rng)?;
            let probe = chosen.iter().map(|&(id, a, _)| (a, id)).collect();
            let gallery = chosen.iter().map(|&(id, _, b)| (b, id)).collect();
            (probe, gallery)
        }
    };
    gallery.shuffle(rng);
    Ok(RetrievalSplit { probe, gallery })
}

/// Worker count: `DIR_LEARN_THREADS` if set, else the available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `f(0..n)` on up to `threads` scoped workers, results in index order.
pub fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (c, part) in slots.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in part.iter_mut().enumerate() {
                    *slot = Some(f(c * chunk + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub probe_size: usize,
    pub gallery_size: usize,
    /// Mean over splits.
    pub mean: MetricReport,
    pub splits: Vec<MetricReport>,
}

/// Per-split rng: stream `split` of the master seed.
pub fn split_rng(seed: u64, split: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split as u64);
    rng
}

/// Embeds the pool once, then ranks galleries by Euclidean distance on each split.
pub fn evaluate_over_splits<E>(embed: E, protocol: Protocol, pool: &IdPool, n_splits: usize, seed: u64) -> Result<ProtocolReport>
where
    E: FnOnce(&[usize]) -> Result<Tensor>,
{
    if n_splits == 0 {
        return Err(Error::config("n_splits", "must be at least 1"));
    }
    let all: Vec<usize> = (0..pool.len()).collect();
    let emb = embed(&all)?;
    if emb.shape()[0] != pool.len() {
        return Err(Error::dim("evaluate_over_splits", "embeddings", pool.len(), emb.shape()[0]));
    }
    let results = parallel_map(n_splits, thread_count(), |s| -> Result<(usize, usize, MetricReport)> {
        let split = make_split(protocol, pool, &mut split_rng(seed, s))?;
        let pick = |xs: &[(usize, usize)]| -> Result<Tensor> { emb.select_rows(&xs.iter().map(|x| x.0).collect::<Vec<_>>()) };
        let d = euclidean_distances(&pick(&split.probe)?, &pick(&split.gallery)?)?;
        let pid: Vec<usize> = split.probe.iter().map(|x| x.1).collect();
        let gid: Vec<usize> = split.gallery.iter().map(|x| x.1).collect();
        Ok((pid.len(), gid.len(), cmc_map(&d, &pid, &gid)?.report()))
    });
    let results: Vec<(usize, usize, MetricReport)> = results.into_iter().collect::<Result<_>>()?;
    let n = results.len() as f64;
    let mut rank_k = BTreeMap::new();
    for &k in &REPORTED_RANKS {
        rank_k.insert(k, results.iter().map(|r| r.2.rank_k[&k]).sum::<f64>() / n);
    }
    Ok(ProtocolReport {
        protocol,
        probe_size: results[0].0,
        gallery_size: results[0].1,
        mean: MetricReport {
            rank_k,
            map: results.iter().map(|r| r.2.map).sum::<f64>() / n,
        },
        splits: results.into_iter().map(|r| r.2).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub datasets: Vec<ProtocolReport>,
    /// Minimum mean rank-1 across datasets.
    pub wda: f64,
}

/// Every protocol on its reference-sized synthetic pool, `f_S` embeddings.
pub fn evaluate_retrieval(bundle: &ModelBundle, n_splits: usize, seed: u64) -> Result<RetrievalReport> {
    let [c, h, w] = bundle.spec.encoder.input_shape;
    if c != 1 || h != w {
        return Err(Error::Capability(format!(
            "synthetic retrieval pools render square single-channel images, encoder expects {c}x{h}x{w}"
        )));
    }
    let mut datasets = Vec::new();
    for (i, protocol) in Protocol::ALL.into_iter().enumerate() {
        let pool = IdPool::reference(protocol);
        let images = pool.synthetic_images(h, seed.wrapping_add(i as u64))?;
        let report = evaluate_over_splits(|_| bundle.embed(Component::FS, &images, 256), protocol, &pool, n_splits, seed)?;
        datasets.push(report);
    }
    let wda = wda(&datasets.iter().map(|d| d.mean.rank_k[&1]).collect::<Vec<_>>())?;
    Ok(RetrievalReport { datasets, wda })
}

fn non_empty(data: &MultiDomainDataset, op: &'static str) -> Result<()> {
    if data.is_empty() {
        Err(Error::DegenerateBatch { op, count: 0 })
    } else {
        Ok(())
    }
}

/// Match rate of `argmax C_S(f_S(x))` against the identity labels.
pub fn classification_accuracy(bundle: &ModelBundle, data: &MultiDomainDataset) -> Result<f64> {
    non_empty(data, "classification_accuracy")?;
    let pred = bundle.predict_ids(&data.all_pixels()?)?;
    Ok(accuracy(&pred, &data.identities))
}

/// Fraction of equal entries.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, y)| p == y).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Classification accuracy within each domain of `data`, by domain index.
pub fn per_domain_accuracy(bundle: &ModelBundle, data: &MultiDomainDataset) -> Result<BTreeMap<usize, f64>> {
    non_empty(data, "per_domain_accuracy")?;
    let pred = bundle.predict_ids(&data.all_pixels()?)?;
    let mut out = BTreeMap::new();
    for d in data.domains.iter().copied().collect::<BTreeSet<_>>() {
        let idx = data.select(|i| data.domains[i] == d);
        let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
        let t: Vec<usize> = idx.iter().map(|&i| data.identities[i]).collect();
        out.insert(d, accuracy(&p, &t));
    }
    Ok(out)
}

/// Majority vote of the `k` nearest `fit` rows; ties go to the smaller label.
pub fn knn_predict(fit: &Tensor, fit_labels: &[usize], query: &Tensor, k: usize) -> Result<Vec<usize>> {
    if fit.shape()[0] != fit_labels.len() {
        return Err(Error::dim("knn_predict", "fit labels", fit.shape()[0], fit_labels.len()));
    }
    if fit_labels.is_empty() || k == 0 {
        return Err(Error::DegenerateBatch {
            op: "knn_predict",
            count: fit_labels.len().min(k),
        });
    }
    let d = euclidean_distances(query, fit)?;
    let classes = fit_labels.iter().max().map_or(0, |m| m + 1);
    Ok((0..query.shape()[0])
        .map(|i| {
            let order = ranking(d.row(i));
            let mut votes = vec![0usize; classes];
            for &j in order.iter().take(k) {
                votes[fit_labels[j]] += 1;
            }
            let best = *votes.iter().max().expect("at least one class");
            votes.iter().position(|&v| v == best).expect("maximum is present")
        })
        .collect())
}

/// k-NN probe accuracies on frozen latents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub domain_from_v: f64,
    pub class_from_v: f64,
    pub domain_from_s: f64,
    pub class_from_s: f64,
}

/// Fits k-NN probes on `fit` latents and scores them on `held_out`.
pub fn probe_report(bundle: &ModelBundle, fit: &MultiDomainDataset, held_out: &MultiDomainDataset) -> Result<ProbeReport> {
    non_empty(fit, "probe_report")?;
    non_empty(held_out, "probe_report")?;
    let (xf, xh) = (fit.all_pixels()?, held_out.all_pixels()?);
    let sf = bundle.embed(Component::FS, &xf, 256)?;
    let vf = bundle.embed(Component::FV, &xf, 256)?;
    let sh = bundle.embed(Component::FS, &xh, 256)?;
    let vh = bundle.embed(Component::FV, &xh, 256)?;
    let score = |f: &Tensor, fl: &[usize], q: &Tensor, ql: &[usize]| -> Result<f64> { Ok(accuracy(&knn_predict(f, fl, q, PROBE_K)?, ql)) };
    Ok(ProbeReport {
        domain_from_v: score(&vf, &fit.domains, &vh, &held_out.domains)?,
        class_from_v: score(&vf, &fit.identities, &vh, &held_out.identities)?,
        domain_from_s: score(&sf, &fit.domains, &sh, &held_out.domains)?,
        class_from_s: score(&sf, &fit.identities, &sh, &held_out.identities)?,
    })
}

/// Writes 2-D latents as CSV with header `x,y,class,domain`.
pub fn write_latent_csv<W: Write>(out: W, latents: &Tensor, classes: &[usize], domains: &[usize]) -> Result<()> {
    let [n, d] = latents.shape()[..] else {
        return Err(Error::Contract("latents must be [N, 2]".into()));
    };
    if d != 2 {
        return Err(Error::dim("write_latent_csv", "latent width", 2, d));
    }
    if classes.len() != n || domains.len() != n {
        return Err(Error::dim("write_latent_csv", "labels", n, classes.len().min(domains.len())));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "class", "domain"]).map_err(csv_err)?;
    for i in 0..n {
        let r = latents.row(i);
        w.write_record([r[0].to_string(), r[1].to_string(), classes[i].to_string(), domains[i].to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Latents of both encoders for `data`, ready for [`write_latent_csv`].
pub fn export_latents(bundle: &ModelBundle, data: &MultiDomainDataset) -> Result<(Tensor, Tensor)> {
    non_empty(data, "export_latents")?;
    let x = data.all_pixels()?;
    Ok((bundle.embed(Component::FS, &x, 256)?, bundle.embed(Component::FV, &x, 256)?))
}

/// Projects rows onto their top two principal axes. Two-column input is
/// returned unchanged; narrower input is zero-padded. Each axis is signed so
/// its largest-magnitude loading is positive.
pub fn project_2d(latents: &Tensor) -> Result<Tensor> {
    let [n, d] = latents.shape()[..] else {
        return Err(Error::Contract("latents must be [N, D]".into()));
    };
    if d == 2 {
        return Ok(latents.clone());
    }
    if d < 2 {
        let mut data = vec![0.0; n * 2];
        for i in 0..n {
            data[i * 2..i * 2 + d].copy_from_slice(latents.row(i));
        }
        return Tensor::new(vec![n, 2], data);
    }
    let x = nalgebra::DMatrix::from_row_slice(n, d, latents.data());
    let mean = x.row_mean();
    let centered = nalgebra::DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut data = vec![0.0; n * 2];
    for (c, &axis) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(axis).into_owned();
        let lead = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a))).unwrap_or(0);
        if v[lead] < 0.0 {
            v = -v;
        }
        let proj = &centered * v;
        for i in 0..n {
            data[i * 2 + c] = proj[i];
        }
    }
    Tensor::new(vec![n, 2], data)
}
