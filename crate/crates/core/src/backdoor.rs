//! Backdoor adjustment over a mini-batch pool of domain factors.
//!
//! Each sample's identity factor is paired with K selected or synthesized
//! domain factors. Selection works on factor values only; the resulting
//! [`Recipe`]s are replayed on the tape so that gradients reach whichever
//! factors are live.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Head, ModelBundle};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    KRandom,
    KHardest,
    KMixup,
    KMixHard,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::KRandom, Strategy::KHardest, Strategy::KMixup, Strategy::KMixHard];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::KRandom => "k-random",
            Strategy::KHardest => "k-hardest",
            Strategy::KMixup => "k-mixup",
            Strategy::KMixHard => "k-mixhard",
        }
    }

    fn mixes(self) -> bool {
        matches!(self, Strategy::KMixup | Strategy::KMixHard)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::config("ba.strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaConfig {
    pub strategy: Strategy,
    pub k: usize,
    /// Mixup interpolation weight.
    pub alpha: f64,
}

impl BaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("ba.k", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("ba.alpha", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// How one adjusted factor is formed from pool rows: `alpha * v[first] + (1 - alpha) * v[second]`.
/// Plain selections use `first == second`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recipe {
    pub first: usize,
    pub second: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The `k` pool rows (excluding `i`) with lowest cosine similarity to row `i`;
/// ties go to the lower index.
pub fn hardest(pool: &Tensor, i: usize, k: usize) -> Result<Vec<usize>> {
    let n = pool.shape()[0];
    if k > n.saturating_sub(1) {
        return Err(Error::PoolExhausted {
            needed: k,
            available: n.saturating_sub(1),
        });
    }
    let vi = pool.row(i);
    let mut cands: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (cosine(vi, pool.row(j)), j)).collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(cands.into_iter().take(k).map(|(_, j)| j).collect())
}

/// Two distinct entries of `from` (the same one twice if it has a single entry).
fn random_pair<R: Rng>(from: &[usize], rng: &mut R) -> Recipe {
    if from.len() < 2 {
        return Recipe {
            first: from[0],
            second: from[0],
        };
    }
    let picked = sample(rng, from.len(), 2);
    Recipe {
        first: from[picked.index(0)],
        second: from[picked.index(1)],
    }
}

/// The K recipes for sample `i` of a pool shaped `[N, dv]`.
pub fn select_recipes<R: Rng>(config: &BaConfig, pool: &Tensor, i: usize, rng: &mut R) -> Result<Vec<Recipe>> {
    config.validate()?;
    let [n, _] = pool.shape()[..] else {
        return Err(Error::Contract(format!("factor pool must be [N, dv], got {:?}", pool.shape())));
    };
    if i >= n {
        return Err(Error::Contract(format!("sample index {i} outside pool of {n}")));
    }
    let k = config.k;
    let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    match config.strategy {
        Strategy::KRandom => {
            if k > others.len() {
                return Err(Error::PoolExhausted {
                    needed: k,
                    available: others.len(),
                });
            }
            Ok(sample(rng, others.len(), k)
                .into_iter()
                .map(|p| Recipe {
                    first: others[p],
                    second: others[p],
                })
                .collect())
        }
        Strategy::KHardest => Ok(hardest(pool, i, k)?
            .into_iter()
            .map(|j| Recipe { first: j, second: j })
            .collect()),
        Strategy::KMixup => {
            if others.is_empty() {
                return Err(Error::PoolExhausted { needed: 1, available: 0 });
            }
            Ok((0..k).map(|_| random_pair(&others, rng)).collect())
        }
        Strategy::KMixHard => {
            let hard = hardest(pool, i, k)?;
            Ok((0..k).map(|_| random_pair(&hard, rng)).collect())
        }
    }
}

fn mix_weight(config: &BaConfig) -> f64 {
    if config.strategy.mixes() {
        config.alpha
    } else {
        1.0
    }
}

/// Materializes the K adjusted factors for sample `i`: `[K, dv]`.
pub fn select_factors<R: Rng>(config: &BaConfig, pool: &Tensor, i: usize, rng: &mut R) -> Result<Tensor> {
    let recipes = select_recipes(config, pool, i, rng)?;
    let a = mix_weight(config);
    let dv = pool.shape()[1];
    let mut data = Vec::with_capacity(recipes.len() * dv);
    for r in &recipes {
        let (x, y) = (pool.row(r.first), pool.row(r.second));
        data.extend(x.iter().zip(y).map(|(p, q)| a * p + (1.0 - a) * q));
    }
    Tensor::new(vec![recipes.len(), dv], data)
}

/// `(1/K) Σ_k softmax(head(s ⊕ v_k))` for one identity factor.
pub fn backdoor_predict(bundle: &ModelBundle, head: &Head, s: &[f64], adjusted_vs: &Tensor) -> Result<Vec<f64>> {
    let [k, dv] = adjusted_vs.shape()[..] else {
        return Err(Error::Contract("adjusted factors must be [K, dv]".into()));
    };
    let width = s.len() + dv;
    if width != head.in_features {
        return Err(Error::dim("backdoor_predict", "concatenated width", head.in_features, width));
    }
    let mut rows = Vec::with_capacity(k * width);
    for j in 0..k {
        rows.extend_from_slice(s);
        rows.extend_from_slice(adjusted_vs.row(j));
    }
    let p = bundle.posteriors(head, &Tensor::new(vec![k, width], rows)?)?;
    let m = head.classes;
    let mut out = vec![0.0; m];
    for j in 0..k {
        for (o, q) in out.iter_mut().zip(p.row(j)) {
            *o += q;
        }
    }
    Ok(out.into_iter().map(|x| x / k as f64).collect())
}

/// Recipes for every sample of the batch, drawn in sample order.
pub fn batch_recipes<R: Rng>(config: &BaConfig, pool: &Tensor, rng: &mut R) -> Result<Vec<Vec<Recipe>>> {
    (0..pool.shape()[0]).map(|i| select_recipes(config, pool, i, rng)).collect()
}

/// Head logits on all adjusted concatenations, shaped `[K, N, M]`.
/// Row `(k, i)` is `head(s_i ⊕ ṽ_{i,k})`.
pub fn adjusted_logits(
    tape: &mut Tape,
    bundle: &ModelBundle,
    head: &Head,
    s: Var,
    v: Var,
    config: &BaConfig,
    recipes: &[Vec<Recipe>],
) -> Result<Var> {
    let n = tape.shape(s)[0];
    if recipes.len() != n {
        return Err(Error::dim("adjusted_logits", "batch", n, recipes.len()));
    }
    let k = config.k;
    let mut first = Vec::with_capacity(k * n);
    let mut second = Vec::with_capacity(k * n);
    for kk in 0..k {
        for r in recipes {
            let rec = r
                .get(kk)
                .ok_or_else(|| Error::Contract(format!("recipe list shorter than K = {k}")))?;
            first.push(rec.first);
            second.push(rec.second);
        }
    }
    let srep = tape.gather_rows(s, (0..k).flat_map(|_| 0..n).collect())?;
    let vadj = tape.mix_rows(v, first, second, mix_weight(config))?;
    let cat = tape.concat_cols(srep, vadj)?;
    let logits = bundle.classify(tape, head, cat)?;
    let m = head.classes;
    tape.reshape(logits, vec![k, n, m])
}
