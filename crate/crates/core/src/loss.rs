//! Weighted in-sequence / in-batch InfoNCE.
//!
//! For a query `q` with positive chunk `k⁺`:
//!
//! ```text
//! L_seq   = -log  exp(s(q,k⁺)/τ) / Σ_{k ∈ N_seq}         exp(s(q,k)/τ)
//! L_batch = -log  exp(s(q,k⁺)/τ) / Σ_{k ∈ N_batch ∪ {k⁺}} exp(s(q,k)/τ)
//! L       = λ_seq · mean(L_seq) + (1 - λ_seq) · mean(L_batch)
//! ```
//!
//! `N_seq` holds every chunk of the positive's document (`k⁺` included) and
//! `N_batch` every chunk of the other documents in the batch.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    Cosine,
    Maxsim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_seq: f64,
    pub temperature: f64,
    pub scorer: Scorer,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_seq: 0.1,
            temperature: 0.05,
            scorer: Scorer::Cosine,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_seq) {
            return Err(Error::Loss(format!("lambda_seq {} outside [0, 1]", self.lambda_seq)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Loss(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// A query or chunk representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Rep {
    /// Pooled vector; scored by cosine.
    Single(Array1<f64>),
    /// Unit-norm token vectors, one per row; scored by MaxSim.
    Multi(Array2<f64>),
}

impl Rep {
    fn zeros_like(&self) -> Rep {
        match self {
            Rep::Single(v) => Rep::Single(Array1::zeros(v.len())),
            Rep::Multi(m) => Rep::Multi(Array2::zeros(m.raw_dim())),
        }
    }

    fn scaled_add(&mut self, alpha: f64, other: &Rep) {
        match (self, other) {
            (Rep::Single(a), Rep::Single(b)) => a.scaled_add(alpha, b),
            (Rep::Multi(a), Rep::Multi(b)) => a.scaled_add(alpha, b),
            _ => unreachable!("representation kinds checked by score"),
        }
    }

    pub fn as_single(&self) -> Option<&Array1<f64>> {
        match self {
            Rep::Single(v) => Some(v),
            Rep::Multi(_) => None,
        }
    }

    pub fn as_multi(&self) -> Option<&Array2<f64>> {
        match self {
            Rep::Multi(m) => Some(m),
            Rep::Single(_) => None,
        }
    }
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Loss("zero-norm vector under cosine scoring".into()));
    }
    Ok(a.dot(b) / (na * nb))
}

/// Σ over query rows of the best dot product with any chunk row.
pub fn maxsim(query: &Array2<f64>, chunk: &Array2<f64>) -> f64 {
    let dots = query.dot(&chunk.t());
    dots.rows()
        .into_iter()
        .map(|r| r.fold(f64::NEG_INFINITY, |m, &x| m.max(x)))
        .sum()
}

pub fn score(query: &Rep, chunk: &Rep, scorer: Scorer) -> Result<f64> {
    match (query, chunk, scorer) {
        (Rep::Single(q), Rep::Single(c), Scorer::Cosine) => cosine(q, c),
        (Rep::Multi(q), Rep::Multi(c), Scorer::Maxsim) => {
            if q.ncols() != c.ncols() {
                return Err(Error::Loss("dimension mismatch".into()));
            }
            Ok(maxsim(q, c))
        }
        _ => Err(Error::Loss(format!("representation kind does not match scorer {scorer:?}"))),
    }
}

/// Score with its gradients with respect to both arguments.
pub fn score_with_grad(query: &Rep, chunk: &Rep, scorer: Scorer) -> Result<(f64, Rep, Rep)> {
    match (query, chunk, scorer) {
        (Rep::Single(q), Rep::Single(c), Scorer::Cosine) => {
            let s = cosine(q, c)?;
            let nq = q.dot(q).sqrt();
            let nc = c.dot(c).sqrt();
            let dq = (c / (nq * nc)) - &(q * (s / (nq * nq)));
            let dc = (q / (nq * nc)) - &(c * (s / (nc * nc)));
            Ok((s, Rep::Single(dq), Rep::Single(dc)))
        }
        (Rep::Multi(q), Rep::Multi(c), Scorer::Maxsim) => {
            let dots = q.dot(&c.t());
            let mut dq = Array2::zeros(q.raw_dim());
            let mut dc = Array2::zeros(c.raw_dim());
            let mut s = 0.0;
            for (i, row) in dots.rows().into_iter().enumerate() {
                let (best, val) = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| if v > bv { (j, v) } else { (bi, bv) });
                s += val;
                dq.row_mut(i).assign(&c.row(best));
                let mut target = dc.row_mut(best);
                target += &q.row(i);
            }
            Ok((s, Rep::Multi(dq), Rep::Multi(dc)))
        }
        _ => Err(Error::Loss(format!("representation kind does not match scorer {scorer:?}"))),
    }
}

/// Location of a chunk inside a batch: `(document position, chunk index)`.
pub type ChunkRef = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub query: Rep,
    pub positive: ChunkRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    /// Chunk representations of each document, in chunk order.
    pub docs: Vec<Vec<Rep>>,
    pub triplets: Vec<Triplet>,
}

impl TrainingBatch {
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.triplets.iter().enumerate() {
            let (d, c) = t.positive;
            if self.docs.get(d).is_none_or(|doc| c >= doc.len()) {
                return Err(Error::Loss(format!("triplet {i}: positive ({d}, {c}) does not resolve")));
            }
        }
        Ok(())
    }

    pub fn num_chunks(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSets {
    /// Chunks of the positive's document, positive included.
    pub in_sequence: Vec<ChunkRef>,
    /// Chunks of every other document.
    pub in_batch: Vec<ChunkRef>,
}

pub fn build_negative_sets(batch: &TrainingBatch, triplet: &Triplet) -> NegativeSets {
    let (pos_doc, _) = triplet.positive;
    let mut in_sequence = Vec::new();
    let mut in_batch = Vec::new();
    for (d, doc) in batch.docs.iter().enumerate() {
        let target = if d == pos_doc { &mut in_sequence } else { &mut in_batch };
        target.extend((0..doc.len()).map(|c| (d, c)));
    }
    NegativeSets { in_sequence, in_batch }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletDiagnostics {
    pub l_seq: f64,
    pub l_batch: f64,
    pub positive_score: f64,
    /// Chunks in the whole batch scoring strictly above the positive.
    pub rank_in_batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub l_seq: f64,
    pub l_batch: f64,
    pub per_triplet: Vec<TripletDiagnostics>,
}

/// Gradients of the loss with respect to every representation in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub docs: Vec<Vec<Rep>>,
    pub queries: Vec<Rep>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct TripletTerms {
    diag: TripletDiagnostics,
    /// dL_total/ds for every chunk of the batch in (doc, chunk) order.
    d_scores: Vec<f64>,
}

fn triplet_terms(batch: &TrainingBatch, triplet: &Triplet, cfg: &LossConfig, n: f64) -> Result<TripletTerms> {
    let (pd, pc) = triplet.positive;
    let offsets: Vec<usize> = batch
        .docs
        .iter()
        .scan(0, |acc, d| {
            let o = *acc;
            *acc += d.len();
            Some(o)
        })
        .collect();
    let mut scaled = Vec::with_capacity(batch.num_chunks());
    for doc in &batch.docs {
        for chunk in doc {
            scaled.push(score(&triplet.query, chunk, cfg.scorer)? / cfg.temperature);
        }
    }
    if scaled.iter().any(|s| !s.is_finite()) {
        return Err(Error::Loss("non-finite score".into()));
    }
    let pos = offsets[pd] + pc;
    let seq_range = offsets[pd]..offsets[pd] + batch.docs[pd].len();
    let s_pos = scaled[pos];

    let seq_lse = log_sum_exp(scaled[seq_range.clone()].iter().copied());
    let batch_vals = scaled
        .iter()
        .enumerate()
        .filter(|(i, _)| !seq_range.contains(i) || *i == pos)
        .map(|(_, &v)| v);
    let batch_lse = log_sum_exp(batch_vals);
    let l_seq = seq_lse - s_pos;
    let l_batch = batch_lse - s_pos;

    let ws = cfg.lambda_seq / n / cfg.temperature;
    let wb = (1.0 - cfg.lambda_seq) / n / cfg.temperature;
    let mut d_scores = vec![0.0; scaled.len()];
    for (i, (&v, d)) in scaled.iter().zip(d_scores.iter_mut()).enumerate() {
        let in_seq = seq_range.contains(&i);
        if in_seq {
            *d += ws * (v - seq_lse).exp();
        }
        if !in_seq || i == pos {
            *d += wb * (v - batch_lse).exp();
        }
    }
    d_scores[pos] -= ws + wb;

    let rank_in_batch = scaled.iter().filter(|&&v| v > s_pos).count();
    Ok(TripletTerms {
        diag: TripletDiagnostics {
            l_seq,
            l_batch,
            positive_score: s_pos * cfg.temperature,
            rank_in_batch,
        },
        d_scores,
    })
}

fn loss_terms(batch: &TrainingBatch, cfg: &LossConfig) -> Result<(LossOutput, Vec<TripletTerms>)> {
    cfg.validate()?;
    batch.validate()?;
    if batch.triplets.is_empty() {
        return Err(Error::Loss("batch has no triplets".into()));
    }
    let n = batch.triplets.len() as f64;
    let terms = par::try_map(&batch.triplets, |t| triplet_terms(batch, t, cfg, n))?;
    let l_seq = terms.iter().map(|t| t.diag.l_seq).sum::<f64>() / n;
    let l_batch = terms.iter().map(|t| t.diag.l_batch).sum::<f64>() / n;
    let loss = cfg.lambda_seq * l_seq + (1.0 - cfg.lambda_seq) * l_batch;
    let out = LossOutput {
        loss,
        l_seq,
        l_batch,
        per_triplet: terms.iter().map(|t| t.diag).collect(),
    };
    Ok((out, terms))
}

/// The weighted InfoNCE loss of a batch.
pub fn insent_loss(batch: &TrainingBatch, cfg: &LossConfig) -> Result<LossOutput> {
    Ok(loss_terms(batch, cfg)?.0)
}

/// The loss together with its gradient for every representation.
pub fn insent_loss_with_grad(batch: &TrainingBatch, cfg: &LossConfig) -> Result<(LossOutput, LossGrads)> {
    let (out, terms) = loss_terms(batch, cfg)?;
    let mut doc_grads: Vec<Vec<Rep>> = batch
        .docs
        .iter()
        .map(|d| d.iter().map(Rep::zeros_like).collect())
        .collect();
    let mut query_grads = Vec::with_capacity(batch.triplets.len());
    for (triplet, term) in batch.triplets.iter().zip(&terms) {
        let mut dq = triplet.query.zeros_like();
        let mut k = 0;
        for (d, doc) in batch.docs.iter().enumerate() {
            for (c, chunk) in doc.iter().enumerate() {
                let coeff = term.d_scores[k];
                k += 1;
                if coeff == 0.0 {
                    continue;
                }
                let (_, gq, gc) = score_with_grad(&triplet.query, chunk, cfg.scorer)?;
                dq.scaled_add(coeff, &gq);
                doc_grads[d][c].scaled_add(coeff, &gc);
            }
        }
        query_grads.push(dq);
    }
    Ok((
        out,
        LossGrads {
            docs: doc_grads,
            queries: query_grads,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn single(v: &[f64]) -> Rep {
        Rep::Single(Array1::from(v.to_vec()))
    }

    #[test]
    fn cosine_of_identical_is_one() {
        let v = single(&[0.3, -2.0, 1.0]);
        assert!((score(&v, &v, Scorer::Cosine).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn maxsim_worked_example() {
        let q = Rep::Multi(array![[1.0, 0.0], [0.0, 1.0]]);
        let c = Rep::Multi(array![[1.0, 0.0], [0.6, 0.8]]);
        assert!((score(&q, &c, Scorer::Maxsim).unwrap() - 1.8).abs() < 1e-12);
    }

    #[test]
    fn maxsim_single_token_is_best_cosine() {
        let q = array![[0.6, 0.8]];
        let c = array![[1.0, 0.0], [0.0, 1.0], [0.8, 0.6]];
        let best = c.rows().into_iter().map(|r| r.dot(&q.row(0))).fold(f64::MIN, f64::max);
        assert_eq!(maxsim(&q, &c), best);
    }

    #[test]
    fn zero_vector_under_cosine_errors() {
        assert!(score(&single(&[0.0, 0.0]), &single(&[1.0, 0.0]), Scorer::Cosine).is_err());
    }

    #[test]
    fn kind_mismatch_errors() {
        let s = single(&[1.0, 0.0]);
        let m = Rep::Multi(array![[1.0, 0.0]]);
        assert!(score(&s, &m, Scorer::Cosine).is_err());
        assert!(score(&m, &m, Scorer::Cosine).is_err());
    }

    fn batch(sizes: &[usize], positive: ChunkRef) -> TrainingBatch {
        TrainingBatch {
            docs: sizes
                .iter()
                .map(|&n| (0..n).map(|i| single(&[1.0, i as f64 * 0.1])).collect())
                .collect(),
            triplets: vec![Triplet {
                query: single(&[1.0, 0.0]),
                positive,
            }],
        }
    }

    #[test]
    fn negative_set_sizes() {
        let b = batch(&[3, 2], (0, 1));
        let sets = build_negative_sets(&b, &b.triplets[0]);
        assert_eq!(sets.in_sequence.len(), 3);
        assert_eq!(sets.in_batch.len(), 2);
        assert!(sets.in_sequence.contains(&(0, 1)));

        let b = batch(&[4], (0, 0));
        assert!(build_negative_sets(&b, &b.triplets[0]).in_batch.is_empty());

        let b = batch(&[1, 5], (0, 0));
        assert_eq!(build_negative_sets(&b, &b.triplets[0]).in_sequence, vec![(0, 0)]);
    }

    #[test]
    fn uniform_scores_give_log_n() {
        let same = single(&[1.0, 1.0]);
        let b = TrainingBatch {
            docs: vec![vec![same.clone(); 4], vec![same.clone(); 3]],
            triplets: vec![Triplet {
                query: same,
                positive: (0, 2),
            }],
        };
        let out = insent_loss(&b, &LossConfig::default()).unwrap();
        assert!((out.l_seq - 4f64.ln()).abs() < 1e-12);
        assert!((out.l_batch - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn singleton_sequence_has_zero_seq_loss() {
        let b = batch(&[1, 3], (0, 0));
        let out = insent_loss(&b, &LossConfig::default()).unwrap();
        assert_eq!(out.per_triplet[0].l_seq, 0.0);
    }

    #[test]
    fn empty_triplets_error() {
        let mut b = batch(&[2], (0, 0));
        b.triplets.clear();
        assert!(insent_loss(&b, &LossConfig::default()).is_err());
    }

    #[test]
    fn lambda_endpoints() {
        let b = batch(&[3, 4], (0, 1));
        let at = |l| {
            insent_loss(
                &b,
                &LossConfig {
                    lambda_seq: l,
                    ..Default::default()
                },
            )
            .unwrap()
        };
        let zero = at(0.0);
        assert_eq!(zero.loss, zero.l_batch);
        let one = at(1.0);
        assert_eq!(one.loss, one.l_seq);
    }

    #[test]
    fn rep_gradients_match_finite_differences() {
        let docs = vec![
            vec![single(&[0.3, 1.0, -0.2]), single(&[0.9, -0.4, 0.5])],
            vec![single(&[-0.1, 0.2, 0.8]), single(&[0.4, 0.4, 0.1]), single(&[1.1, 0.0, -0.6])],
        ];
        let triplets = vec![
            Triplet {
                query: single(&[0.5, 0.2, 0.1]),
                positive: (0, 1),
            },
            Triplet {
                query: single(&[-0.3, 0.7, 0.4]),
                positive: (1, 2),
            },
        ];
        let cfg = LossConfig {
            lambda_seq: 0.3,
            temperature: 0.2,
            scorer: Scorer::Cosine,
        };
        let b = TrainingBatch { docs, triplets };
        let (_, grads) = insent_loss_with_grad(&b, &cfg).unwrap();
        let h = 1e-6;
        for d in 0..b.docs.len() {
            for c in 0..b.docs[d].len() {
                for k in 0..3 {
                    let bump = |delta: f64| {
                        let mut b2 = b.clone();
                        if let Rep::Single(v) = &mut b2.docs[d][c] {
                            v[k] += delta;
                        }
                        insent_loss(&b2, &cfg).unwrap().loss
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let a = grads.docs[d][c].as_single().unwrap()[k];
                    assert!((fd - a).abs() < 1e-7, "doc {d} chunk {c} [{k}]: {fd} vs {a}");
                }
            }
        }
        for t in 0..2 {
            for k in 0..3 {
                let bump = |delta: f64| {
                    let mut b2 = b.clone();
                    if let Rep::Single(v) = &mut b2.triplets[t].query {
                        v[k] += delta;
                    }
                    insent_loss(&b2, &cfg).unwrap().loss
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let a = grads.queries[t].as_single().unwrap()[k];
                assert!((fd - a).abs() < 1e-7);
            }
        }
    }
}
