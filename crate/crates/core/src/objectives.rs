//! Training objectives: leave-one-out sub-supports, the prototype contrastive loss,
//! the distance-softmax classification loss, and their sum per episode.
//!
//! Distances are squared Euclidean throughout.

use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::protomodel::{extract_prototype_var, ExtractorParams, ParamVars, SupportSlice};

/// Added to both sums of the contrastive ratio so a one-shot episode stays defined.
pub const IDENTITY_ELEMENT: f64 = 1.0;

/// Leave-one-out subsets of one class's support: for K ≥ 2 the i-th slice omits row i;
/// for K = 1 the only slice is the full support.
pub fn build_sub_supports<T: Real>(class: usize, embeddings: &Tensor<T>) -> Result<Vec<SupportSlice<T>>> {
    if embeddings.numel() == 0 || embeddings.shape().len() != 2 {
        return Err(Error::Usage(format!(
            "sub-supports need a non-empty K×d matrix, got {:?}",
            embeddings.shape()
        )));
    }
    let k = embeddings.rows();
    if k == 1 {
        return Ok(vec![SupportSlice::new(class, embeddings.clone())?]);
    }
    (0..k)
        .map(|skip| {
            let rows: Vec<Vec<T>> = (0..k)
                .filter(|&r| r != skip)
                .map(|r| embeddings.row(r).to_vec())
                .collect();
            SupportSlice::new(class, Tensor::from_rows(&rows)?)
        })
        .collect()
}

/// Sub-prototype handles, `way` classes by `per_class` each, every one a `1 × d` row.
#[derive(Debug, Clone)]
pub struct SubPrototypeSet {
    per_class: Vec<Vec<Var>>,
}

impl SubPrototypeSet {
    pub fn new(per_class: Vec<Vec<Var>>) -> Result<Self> {
        let k = per_class.first().map(Vec::len).unwrap_or(0);
        if k == 0 || per_class.iter().any(|c| c.len() != k) {
            return Err(Error::Usage(
                "sub-prototype set must hold the same non-zero count for every class".into(),
            ));
        }
        Ok(Self { per_class })
    }

    pub fn way(&self) -> usize {
        self.per_class.len()
    }

    pub fn per_class(&self) -> usize {
        self.per_class[0].len()
    }
}

/// `exp((1/N) · (Σ_c Σ_{i,j} D(p_ci, p_cj) + I) / (Σ_{m<n} Σ_{i,j} D(p_mi, p_nj) + I))`
///
/// The numerator runs over all ordered pairs within each class (self-pairs included);
/// the denominator over each unordered pair of distinct classes, all cross pairs.
pub fn prototype_contrastive_loss<T: Real>(g: &mut Graph<T>, subs: &SubPrototypeSet) -> Result<Var> {
    let (n, k) = (subs.way(), subs.per_class());
    if n < 2 {
        return Err(Error::Usage(format!(
            "contrastive loss needs at least 2 classes for negative pairs, got {n}"
        )));
    }
    let all: Vec<Var> = subs.per_class.iter().flatten().copied().collect();
    let stacked = g.concat_rows(&all)?;
    let dist = g.pairwise_sq_dist(stacked, stacked)?;
    let m = n * k;
    let mut intra = vec![T::zero(); m * m];
    let mut inter = vec![T::zero(); m * m];
    for a in 0..m {
        for b in 0..m {
            let (ca, cb) = (a / k, b / k);
            if ca == cb {
                intra[a * m + b] = T::one();
            } else if ca < cb {
                inter[a * m + b] = T::one();
            }
        }
    }
    let num = g.weighted_sum(dist, intra)?;
    let den = g.weighted_sum(dist, inter)?;
    let num = g.add_scalar(num, T::lit(IDENTITY_ELEMENT));
    let den = g.add_scalar(den, T::lit(IDENTITY_ELEMENT));
    let ratio = g.div(num, den)?;
    let scaled = g.scale(ratio, T::one() / T::lit(n as f64));
    Ok(g.exp(scaled))
}

/// Mean cross-entropy of `softmax(−D(query, prototype))` against `labels`.
/// Returns `(loss, logits)` with logits of shape `queries × classes`.
pub fn classifier_loss<T: Real>(
    g: &mut Graph<T>,
    prototypes: Var,
    queries: Var,
    labels: &[usize],
) -> Result<(Var, Var)> {
    let n = g.shape(prototypes)[0];
    let q = g.shape(queries)[0];
    if labels.len() != q {
        return Err(Error::Dimension(format!("{} labels for {q} queries", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Data(format!("label {bad} out of range for {n} classes")));
    }
    let dist = g.pairwise_sq_dist(queries, prototypes)?;
    let logits = g.scale(dist, -T::one());
    let logp = g.log_softmax_lastdim(logits);
    let w = -T::one() / T::lit(q as f64);
    let mut weights = vec![T::zero(); q * n];
    for (i, &l) in labels.iter().enumerate() {
        weights[i * n + l] = w;
    }
    Ok((g.weighted_sum(logp, weights)?, logits))
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub use_prototype_loss: bool,
    /// Use support means as prototypes instead of the extractor.
    pub bypass_module: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            use_prototype_loss: true,
            bypass_module: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLosses<T> {
    pub classifier_loss: T,
    pub prototype_loss: T,
    pub total: T,
    pub logits: Tensor<T>,
}

/// Handles into a recorded episode objective.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeVars {
    pub total: Var,
    pub classifier: Var,
    pub prototype: Option<Var>,
    pub logits: Var,
    pub prototypes: Var,
}

fn class_prototype<T: Real>(
    g: &mut Graph<T>,
    vars: Option<&ParamVars>,
    slice: &SupportSlice<T>,
) -> Result<Var> {
    match vars {
        Some(v) => extract_prototype_var(g, v, slice),
        None => {
            let token = Tensor::matrix(1, slice.dim(), slice.token().to_vec())?;
            Ok(g.constant(token))
        }
    }
}

/// Records the full episode pipeline on `g`. `vars = None` means the extractor is
/// bypassed and every prototype is a support mean.
pub fn record_episode_objective<T: Real>(
    g: &mut Graph<T>,
    vars: Option<&ParamVars>,
    episode: &Episode<T>,
    use_prototype_loss: bool,
) -> Result<EpisodeVars> {
    let mut protos = Vec::with_capacity(episode.way);
    let mut subs = Vec::with_capacity(episode.way);
    for (c, support) in episode.support.iter().enumerate() {
        let full = SupportSlice::new(c, support.clone())?;
        let proto = class_prototype(g, vars, &full)?;
        protos.push(proto);
        if use_prototype_loss {
            let sub = if support.rows() == 1 {
                vec![proto]
            } else {
                build_sub_supports(c, support)?
                    .iter()
                    .map(|s| class_prototype(g, vars, s))
                    .collect::<Result<_>>()?
            };
            subs.push(sub);
        }
    }
    let prototypes = g.concat_rows(&protos)?;
    let queries = g.constant(episode.query.clone());
    let (classifier, logits) = classifier_loss(g, prototypes, queries, &episode.query_labels)?;
    let (total, prototype) = if use_prototype_loss {
        let p = prototype_contrastive_loss(g, &SubPrototypeSet::new(subs)?)?;
        (g.add(classifier, p)?, Some(p))
    } else {
        (classifier, None)
    };
    Ok(EpisodeVars {
        total,
        classifier,
        prototype,
        logits,
        prototypes,
    })
}

fn read_losses<T: Real>(g: &Graph<T>, v: &EpisodeVars) -> EpisodeLosses<T> {
    let classifier_loss = g.value(v.classifier).item();
    let prototype_loss = v.prototype.map_or(T::zero(), |p| g.value(p).item());
    EpisodeLosses {
        classifier_loss,
        prototype_loss,
        total: classifier_loss + prototype_loss,
        logits: g.value(v.logits).clone(),
    }
}

fn check_finite<T: Real>(l: &EpisodeLosses<T>) -> Result<()> {
    for (name, v) in [
        ("classifier loss", l.classifier_loss),
        ("prototype loss", l.prototype_loss),
        ("total loss", l.total),
    ] {
        if !v.is_finite() {
            return Err(Error::numeric(name, format!("non-finite value {v}")));
        }
    }
    Ok(())
}

fn effective_params<T>(
    params: Option<&ExtractorParams<T>>,
    config: ObjectiveConfig,
) -> Result<Option<&ExtractorParams<T>>> {
    match (config.bypass_module, params) {
        (true, _) => Ok(None),
        (false, Some(p)) => Ok(Some(p)),
        (false, None) => Err(Error::Config(
            "extractor parameters are required unless the module is bypassed".into(),
        )),
    }
}

/// Losses of one episode without gradients.
pub fn episode_objective<T: Real>(
    params: Option<&ExtractorParams<T>>,
    episode: &Episode<T>,
    config: ObjectiveConfig,
) -> Result<EpisodeLosses<T>> {
    let params = effective_params(params, config)?;
    let mut g = Graph::new();
    let vars = params.map(|p| p.register(&mut g));
    let v = record_episode_objective(&mut g, vars.as_ref(), episode, config.use_prototype_loss)?;
    let losses = read_losses(&g, &v);
    check_finite(&losses)?;
    Ok(losses)
}

/// Losses of one episode plus the gradient of the total with respect to every parameter.
pub fn episode_gradients<T: Real>(
    params: &ExtractorParams<T>,
    episode: &Episode<T>,
    config: ObjectiveConfig,
) -> Result<(EpisodeLosses<T>, ExtractorParams<T>)> {
    episode_gradients_in(Graph::new(), params, episode, config)
}

/// As [`episode_gradients`], recording on a caller-supplied (usually empty) graph.
pub fn episode_gradients_in<T: Real>(
    mut g: Graph<T>,
    params: &ExtractorParams<T>,
    episode: &Episode<T>,
    config: ObjectiveConfig,
) -> Result<(EpisodeLosses<T>, ExtractorParams<T>)> {
    if config.bypass_module {
        return Err(Error::Config("no gradients exist with the module bypassed".into()));
    }
    let vars = params.register(&mut g);
    let v = record_episode_objective(&mut g, Some(&vars), episode, config.use_prototype_loss)?;
    let losses = read_losses(&g, &v);
    check_finite(&losses)?;
    g.backward(v.total)?;
    Ok((losses, vars.gradients(&g, params)))
}
