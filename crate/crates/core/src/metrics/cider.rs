use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use super::MetricError;

pub const N_MAX: usize = 4;
/// Standard deviation of the Gaussian length penalty.
pub const SIGMA: f64 = 6.0;

// Ordered maps keep every sum in a fixed order, so scores are bit-reproducible.
type Vectors = Vec<(BTreeMap<String, f64>, f64)>;

fn key(g: &[String]) -> String {
    g.join(" ")
}

/// Document frequencies over the reference captions of a corpus, one
/// document per image. Cheap to clone.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    images: usize,
    df: Arc<HashMap<String, usize>>,
}

impl CorpusStats {
    pub fn build(references: &[Vec<Vec<String>>]) -> Result<Self, MetricError> {
        if references.is_empty() {
            return Err(MetricError::EmptyCorpus);
        }
        let mut df: HashMap<String, usize> = HashMap::new();
        for (i, refs) in references.iter().enumerate() {
            if refs.is_empty() {
                return Err(MetricError::NoReferences(i));
            }
            let mut seen = HashSet::new();
            for r in refs {
                for n in 1..=N_MAX.min(r.len()) {
                    seen.extend(r.windows(n).map(key));
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Ok(Self { images: references.len(), df: Arc::new(df) })
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn df(&self, gram: &[String]) -> usize {
        self.df.get(&key(gram)).copied().unwrap_or(0)
    }

    /// `log(M / max(1, df))`.
    pub fn idf(&self, gram: &[String]) -> f64 {
        self.idf_key(&key(gram))
    }

    fn idf_key(&self, k: &str) -> f64 {
        (self.images as f64).ln() - (self.df.get(k).copied().unwrap_or(0).max(1) as f64).ln()
    }

    fn vectors(&self, tokens: &[String]) -> Vectors {
        (1..=N_MAX)
            .map(|n| {
                let mut v: BTreeMap<String, f64> = BTreeMap::new();
                if tokens.len() >= n {
                    for w in tokens.windows(n) {
                        *v.entry(key(w)).or_insert(0.0) += 1.0;
                    }
                }
                let mut norm = 0.0;
                for (g, tf) in v.iter_mut() {
                    *tf *= self.idf_key(g);
                    norm += *tf * *tf;
                }
                (v, norm.sqrt())
            })
            .collect()
    }

    /// Precomputes the tf-idf vectors of one image's references.
    pub fn prepare(&self, refs: &[Vec<String>]) -> CiderRefs {
        CiderRefs { refs: refs.iter().map(|r| (self.vectors(r), r.len())).collect(), stats: self.clone() }
    }
}

/// One image's references in tf-idf form.
#[derive(Debug, Clone)]
pub struct CiderRefs {
    refs: Vec<(Vectors, usize)>,
    stats: CorpusStats,
}

pub(crate) fn score_quiet(candidate: &[String], refs: &CiderRefs) -> f64 {
    if candidate.is_empty() || refs.refs.is_empty() {
        return 0.0;
    }
    let cand = refs.stats.vectors(candidate);
    let mut total = 0.0;
    for (rv, rlen) in &refs.refs {
        let delta = candidate.len() as f64 - *rlen as f64;
        let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
        for ((cv, cn), (rvec, rn)) in cand.iter().zip(rv) {
            if *cn == 0.0 || *rn == 0.0 {
                continue;
            }
            // Candidate counts are clipped at the reference counts.
            let dot: f64 = cv.iter().filter_map(|(g, c)| rvec.get(g).map(|r| c.min(*r) * r)).sum();
            total += dot / (cn * rn) * penalty;
        }
    }
    total / N_MAX as f64 / refs.refs.len() as f64 * 10.0
}

impl CiderRefs {
    pub fn score(&self, candidate: &[String]) -> f64 {
        if candidate.is_empty() {
            log::warn!("empty candidate scores zero");
        }
        score_quiet(candidate, self)
    }
}

/// CIDEr-D of one candidate against one image's references.
pub fn cider_d(candidate: &[String], refs: &[Vec<String>], stats: &CorpusStats) -> f64 {
    stats.prepare(refs).score(candidate)
}
