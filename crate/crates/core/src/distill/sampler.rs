use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::domainsim::SampleRecord;
use crate::error::{Error, Result};

/// Labeled training data with identities remapped to dense class indices.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    input_dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    /// Global identity of each dense class.
    class_ids: Vec<u64>,
    by_class: Vec<Vec<usize>>,
}

impl LabeledSet {
    /// Classes are ordered by global identity.
    pub fn from_records(records: &[SampleRecord]) -> Result<Self> {
        let input_dim = records
            .first()
            .map(|r| r.features.len())
            .ok_or_else(|| Error::Usage("empty labeled dataset".into()))?;
        let mut ids = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let id = r.identity.ok_or_else(|| {
                Error::Usage(format!("labeled record {i} ({}) has no identity", r.domain))
            })?;
            if r.features.len() != input_dim {
                return Err(Error::shape(
                    "labeled set",
                    format!("record {i} has {} features, expected {input_dim}", r.features.len()),
                ));
            }
            ids.entry(id).or_insert(());
        }
        let class_ids: Vec<u64> = ids.into_keys().collect();
        let class_of: BTreeMap<u64, usize> = class_ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        let mut by_class = vec![Vec::new(); class_ids.len()];
        let mut labels = Vec::with_capacity(records.len());
        let mut features = Vec::with_capacity(records.len() * input_dim);
        for (i, r) in records.iter().enumerate() {
            let c = class_of[&r.identity.unwrap()];
            labels.push(c);
            by_class[c].push(i);
            features.extend_from_slice(&r.features);
        }
        crate::autodiff::ensure_finite("labeled features", &features)?;
        Ok(Self {
            input_dim,
            features,
            labels,
            class_ids,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_ids(&self) -> &[u64] {
        &self.class_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// `[n, input_dim]` matrix of the given rows.
    pub fn gather(&self, rows: &[usize]) -> Result<Tensor> {
        let data = rows.iter().flat_map(|&i| self.features(i).iter().copied()).collect();
        Tensor::matrix(rows.len(), self.input_dim, data)
    }

    pub fn all_features(&self) -> Result<Tensor> {
        Tensor::matrix(self.len(), self.input_dim, self.features.clone())
    }
}

/// Feature vectors only; identities never reach this type.
#[derive(Debug, Clone)]
pub struct UnlabeledSet {
    input_dim: usize,
    features: Vec<f64>,
}

impl UnlabeledSet {
    /// Identity fields of `records`, if any, are discarded.
    pub fn from_records(records: &[SampleRecord]) -> Result<Self> {
        let input_dim = records.first().map_or(0, |r| r.features.len());
        let mut features = Vec::with_capacity(records.len() * input_dim);
        for (i, r) in records.iter().enumerate() {
            if r.features.len() != input_dim {
                return Err(Error::shape(
                    "unlabeled set",
                    format!("record {i} has {} features, expected {input_dim}", r.features.len()),
                ));
            }
            features.extend_from_slice(&r.features);
        }
        crate::autodiff::ensure_finite("unlabeled features", &features)?;
        Ok(Self { input_dim, features })
    }

    pub fn len(&self) -> usize {
        self.features.len().checked_div(self.input_dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn gather(&self, rows: &[usize]) -> Result<Tensor> {
        let d = self.input_dim;
        let data = rows
            .iter()
            .flat_map(|&i| self.features[i * d..(i + 1) * d].iter().copied())
            .collect();
        Tensor::matrix(rows.len(), d, data)
    }
}

/// Picks `p` distinct identities and `k` samples of each. Identities with
/// fewer than `k` samples are drawn with replacement.
pub fn pk_sample<R: Rng + ?Sized>(set: &LabeledSet, p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(Error::Sampling("p and k must be positive".into()));
    }
    if set.num_classes() < p {
        return Err(Error::Sampling(format!(
            "need {p} identities, dataset has {}",
            set.num_classes()
        )));
    }
    let mut batch = Vec::with_capacity(p * k);
    for c in index::sample(rng, set.num_classes(), p).into_iter() {
        let members = &set.by_class[c];
        if members.len() >= k {
            batch.extend(index::sample(rng, members.len(), k).into_iter().map(|j| members[j]));
        } else {
            batch.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(batch)
}

/// Uniform random rows of the pool; without replacement when the pool is
/// large enough.
pub fn sample_unlabeled<R: Rng + ?Sized>(set: &UnlabeledSet, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = set.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    if n == 0 {
        return Err(Error::Sampling("unlabeled pool is empty".into()));
    }
    if n >= m {
        Ok(index::sample(rng, n, m).into_vec())
    } else {
        Ok((0..m).map(|_| rng.random_range(0..n)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn rec(id: u64, v: f64) -> SampleRecord {
        SampleRecord {
            features: vec![v, -v],
            identity: Some(id),
            camera: 0,
            domain: "d".into(),
        }
    }

    fn set(counts: &[usize]) -> LabeledSet {
        let mut recs = Vec::new();
        for (id, &n) in counts.iter().enumerate() {
            for j in 0..n {
                recs.push(rec(100 + id as u64, j as f64));
            }
        }
        LabeledSet::from_records(&recs).unwrap()
    }

    #[test]
    fn single_sample() {
        let s = set(&[3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(pk_sample(&s, 1, 1, &mut rng).unwrap().len(), 1);
    }

    #[test]
    fn full_pk_batch() {
        let s = set(&[5; 80]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = pk_sample(&s, 64, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 256);
        let mut per: HashMap<usize, Vec<usize>> = HashMap::new();
        for &i in &b {
            per.entry(s.labels()[i]).or_default().push(i);
        }
        assert_eq!(per.len(), 64);
        for rows in per.values() {
            assert_eq!(rows.len(), 4);
            let mut u = rows.clone();
            u.sort();
            u.dedup();
            assert_eq!(u.len(), 4, "no repeats when enough images exist");
        }
    }

    #[test]
    fn small_identity_uses_replacement() {
        let s = set(&[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = pk_sample(&s, 1, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        assert!(b.iter().all(|&i| s.labels()[i] == 0));
    }

    #[test]
    fn too_few_identities() {
        let s = set(&[2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(pk_sample(&s, 3, 1, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn unlabeled_record_without_identity_is_rejected_as_labeled() {
        let mut r = rec(1, 0.0);
        r.identity = None;
        assert!(LabeledSet::from_records(&[r.clone()]).is_err());
        assert_eq!(UnlabeledSet::from_records(&[r]).unwrap().len(), 1);
    }

    #[test]
    fn unlabeled_sampling() {
        let recs: Vec<_> = (0..10).map(|i| rec(0, i as f64)).collect();
        let u = UnlabeledSet::from_records(&recs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut idx = sample_unlabeled(&u, 10, &mut rng).unwrap();
        idx.sort();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert_eq!(sample_unlabeled(&u, 25, &mut rng).unwrap().len(), 25);
        assert!(sample_unlabeled(&u, 0, &mut rng).unwrap().is_empty());
        let empty = UnlabeledSet::from_records(&[]).unwrap();
        assert!(sample_unlabeled(&empty, 3, &mut rng).is_err());
    }
}
