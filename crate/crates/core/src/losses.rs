//! Training objectives. Every loss takes graph variables for the inputs it
//! differentiates through and plain tensors or index slices for the rest,
//! and returns the loss together with a [`LossDiagnostics`] record.

use eln_autograd::{Scalar, Tensor, Var};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

/// A per-pixel 0/1 map over a batch, stored batch-major `[B, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

impl BinaryMap {
    pub fn new(batch: usize, height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != batch * height * width {
            return Err(Error::Invalid(format!(
                "binary map {batch}x{height}x{width} given {} values",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Invalid("binary map values must be 0 or 1".into()));
        }
        Ok(Self { batch, height, width, values })
    }

    pub fn filled(batch: usize, height: usize, width: usize, value: bool) -> Self {
        Self { batch, height, width, values: vec![u8::from(value); batch * height * width] }
    }

    /// `round(p)` of a `[B,1,H,W]` probability map, with 0.5 rounding up.
    pub fn from_probabilities<T: Scalar>(probs: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = probs.dims4()?;
        if c != 1 {
            return Err(Error::Invalid(format!("validity map must have one channel, got {c}")));
        }
        let half = T::from_f64(0.5);
        let values = probs.data().iter().map(|&p| u8::from(p >= half)).collect();
        Ok(Self { batch: n, height: h, width: w, values })
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, b: usize) -> &[u8] {
        let hw = self.pixels_per_image();
        &self.values[b * hw..(b + 1) * hw]
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Batch concatenation.
    pub fn concat(parts: &[&BinaryMap]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Invalid("concat of no maps".into()))?;
        let mut values = Vec::new();
        let mut batch = 0;
        for p in parts {
            if (p.height, p.width) != (first.height, first.width) {
                return Err(Error::Invalid("binary maps differ in size".into()));
            }
            values.extend_from_slice(&p.values);
            batch += p.batch;
        }
        Ok(Self { batch, height: first.height, width: first.width, values })
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|&v| if v == 1 { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(&[self.batch, 1, self.height, self.width], data).expect("sized")
    }
}

/// Side information a loss reports next to its value.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossDiagnostics {
    pub value: f64,
    /// Per-decoder CE for the auxiliary loss, per-image BCE for the weighted BCE.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub terms: Vec<f64>,
    /// Auxiliary gate state, `[k][b]`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub gates: Vec<Vec<bool>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_pixels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchors: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl LossDiagnostics {
    fn of<T: Scalar>(loss: &Var<'_, T>) -> Self {
        Self { value: loss.value().item().to_f64_lossy(), ..Default::default() }
    }

    pub fn gate_fraction(&self) -> Option<f64> {
        let total: usize = self.gates.iter().map(Vec::len).sum();
        (total > 0).then(|| self.gates.iter().flatten().filter(|&&g| g).count() as f64 / total as f64)
    }
}

fn check_labels(labels: &[usize], n: usize, c: usize, hw: usize) -> Result<()> {
    if labels.len() != n * hw {
        return Err(Error::Invalid(format!("{} labels for {n} images of {hw} pixels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
    }
    Ok(())
}

/// Argmax over the channel axis; ties go to the lowest class index.
pub fn argmax_channels<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, c, h, w) = scores.dims4()?;
    let hw = h * w;
    let d = scores.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if d[(b * c + ch) * hw + p] > d[(b * c + best) * hw + p] {
                    best = ch;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Hard pseudo-labels `argmax_c P̃`.
pub fn pseudo_labels<T: Scalar>(teacher_probs: &Tensor<T>) -> Result<Vec<usize>> {
    argmax_channels(teacher_probs)
}

/// `1` where the prediction's argmax equals the ground truth.
pub fn correctness_mask<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<BinaryMap> {
    let (n, c, h, w) = probs.dims4()?;
    check_labels(labels, n, c, h * w)?;
    let pred = argmax_channels(probs)?;
    let values = pred.iter().zip(labels).map(|(p, y)| u8::from(p == y)).collect();
    BinaryMap::new(n, h, w, values)
}

/// Per-image mean cross-entropy as a `[B]` variable.
pub fn ce_per_image<'g, T: Scalar>(logits: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
    let v = logits.value();
    let (n, c, h, w) = v.dims4()?;
    check_labels(labels, n, c, h * w)?;
    let picked = logits.log_softmax()?.select_channel(labels)?;
    Ok(picked.sum_per_item().scale(-T::one() / T::from_f64((h * w) as f64)))
}

/// Per-image mean cross-entropy on plain logits.
pub fn ce_per_image_values<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    check_labels(labels, n, c, hw)?;
    let ls = logits.log_softmax_channels()?;
    Ok((0..n)
        .map(|b| {
            let total: f64 = (0..hw).map(|p| ls.data()[(b * c + labels[b * hw + p]) * hw + p].to_f64_lossy()).sum();
            -total / hw as f64
        })
        .collect())
}

/// Mean pixel-wise cross-entropy of `logits [B,C,H,W]` against `labels`.
pub fn ce_loss<'g, T: Scalar>(logits: Var<'g, T>, labels: &[usize]) -> Result<(Var<'g, T>, LossDiagnostics)> {
    let per_image = ce_per_image(logits, labels)?;
    let n = per_image.value().len();
    if n == 0 {
        return Err(Error::Invalid("cross-entropy over an empty batch".into()));
    }
    let loss = per_image.mean();
    let diag = LossDiagnostics::of(&loss);
    Ok((loss, diag))
}

/// Supervised loss of the main decoder: mean over images of the per-image CE.
pub fn sup_loss<'g, T: Scalar>(logits: Var<'g, T>, labels: &[usize]) -> Result<(Var<'g, T>, LossDiagnostics)> {
    ce_loss(logits, labels)
}

/// Gated auxiliary loss. For image `b` and decoder `k` the CE term counts
/// only when `CE_k(b) > alpha_k * CE_main(b)`. Gates are computed on values
/// and carry no gradient; the main logits are never differentiated here.
pub fn aux_loss<'g, T: Scalar>(
    main_logits: Var<'g, T>,
    aux_logits: &[Var<'g, T>],
    labels: &[usize],
    alphas: &[f64],
) -> Result<(Var<'g, T>, LossDiagnostics)> {
    if aux_logits.len() != alphas.len() {
        return Err(Error::Invalid(format!(
            "{} auxiliary decoders but {} alpha values",
            aux_logits.len(),
            alphas.len()
        )));
    }
    let main_ce = ce_per_image_values(&main_logits.value(), labels)?;
    let n = main_ce.len();
    if n == 0 {
        return Err(Error::Invalid("auxiliary loss over an empty batch".into()));
    }
    let graph = main_logits.graph();
    let mut total: Option<Var<'g, T>> = None;
    let mut diag = LossDiagnostics::default();
    for (logits, &alpha) in aux_logits.iter().zip(alphas) {
        if logits.shape() != main_logits.shape() {
            return Err(Error::Invalid(format!(
                "aux logits {:?} vs main {:?}",
                logits.shape(),
                main_logits.shape()
            )));
        }
        let ce = ce_per_image(*logits, labels)?;
        let ce_values: Vec<f64> = ce.value().data().iter().map(|v| v.to_f64_lossy()).collect();
        let gates: Vec<bool> = ce_values.iter().zip(&main_ce).map(|(a, m)| *a > alpha * m).collect();
        diag.terms.push(ce_values.iter().sum::<f64>() / n as f64);
        if gates.iter().any(|&g| g) {
            let w: Vec<T> = gates.iter().map(|&g| if g { T::one() / T::from_f64(n as f64) } else { T::zero() }).collect();
            let term = ce.weighted_sum(&Tensor::from_vec(&[n], w)?)?;
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
        diag.gates.push(gates);
    }
    let loss = total.unwrap_or_else(|| graph.constant(Tensor::scalar(T::zero())));
    diag.value = loss.value().item().to_f64_lossy();
    Ok((loss, diag))
}

/// Class-balanced BCE on ELN logits. Within each image the mask-0 term is
/// weighted by `#(mask=1) / #(mask=0)`; per-image means are averaged over the
/// batch. An image whose mask is all zero uses weight 1 and adds a warning.
pub fn weighted_bce<'g, T: Scalar>(logits: Var<'g, T>, mask: &BinaryMap) -> Result<(Var<'g, T>, LossDiagnostics)> {
    let v = logits.value();
    let (n, c, h, w) = v.dims4()?;
    if c != 1 || (n, h, w) != (mask.batch, mask.height, mask.width) {
        return Err(Error::Invalid(format!(
            "ELN logits {:?} do not match mask {}x{}x{}",
            v.shape(),
            mask.batch,
            mask.height,
            mask.width
        )));
    }
    if n == 0 {
        return Err(Error::Invalid("weighted BCE over an empty batch".into()));
    }
    let hw = h * w;
    let scale = 1.0 / (n * hw) as f64;
    let mut pos_w = vec![T::zero(); n * hw];
    let mut neg_w = vec![T::zero(); n * hw];
    let mut diag = LossDiagnostics::default();
    for b in 0..n {
        let img = mask.image(b);
        let ones = img.iter().filter(|&&m| m == 1).count();
        let zeros = hw - ones;
        let weight = if ones == 0 {
            diag.warnings.push(format!("image {b}: correctness mask is all zero, using unweighted BCE"));
            1.0
        } else if zeros == 0 {
            0.0
        } else {
            ones as f64 / zeros as f64
        };
        for (p, &m) in img.iter().enumerate() {
            if m == 1 {
                pos_w[b * hw + p] = T::from_f64(scale);
            } else {
                neg_w[b * hw + p] = T::from_f64(weight * scale);
            }
        }
    }
    let pos = logits.log_sigmoid().weighted_sum(&Tensor::from_vec(v.shape(), pos_w)?)?;
    let neg = logits.neg().log_sigmoid().weighted_sum(&Tensor::from_vec(v.shape(), neg_w)?)?;
    let loss = pos.add(neg)?.neg();
    diag.value = loss.value().item().to_f64_lossy();
    Ok((loss, diag))
}

/// Mean of the weighted BCE over the `K+1` decoders' ELN outputs.
pub fn eln_loss<'g, T: Scalar>(logits: &[Var<'g, T>], masks: &[BinaryMap]) -> Result<(Var<'g, T>, LossDiagnostics)> {
    if logits.is_empty() || logits.len() != masks.len() {
        return Err(Error::Invalid(format!("{} ELN outputs for {} masks", logits.len(), masks.len())));
    }
    let mut diag = LossDiagnostics::default();
    let mut total: Option<Var<'g, T>> = None;
    for (l, m) in logits.iter().zip(masks) {
        let (term, d) = weighted_bce(*l, m)?;
        diag.terms.push(d.value);
        diag.warnings.extend(d.warnings);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let loss = total.expect("non-empty").scale(T::one() / T::from_f64(logits.len() as f64));
    diag.value = loss.value().item().to_f64_lossy();
    Ok((loss, diag))
}

/// `L_sup + L_aux + L_ELN`.
pub fn labeled_total<'g, T: Scalar>(sup: Var<'g, T>, aux: Var<'g, T>, eln: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
    let t = sup.add(aux)?;
    Ok(match eln {
        Some(e) => t.add(e)?,
        None => t,
    })
}

/// Masked pseudo-label CE on student logits. `validity` is the `[B,1,H,W]`
/// validity probability map; pixels with `round(validity) = 0` are excluded.
/// The sum over valid pixels is divided by `max(1, #valid)`.
pub fn pseudo_loss<'g, T: Scalar>(
    student_logits: Var<'g, T>,
    pseudo: &[usize],
    validity: &Tensor<T>,
) -> Result<(Var<'g, T>, LossDiagnostics)> {
    let v = student_logits.value();
    let (n, c, h, w) = v.dims4()?;
    check_labels(pseudo, n, c, h * w)?;
    let mask = BinaryMap::from_probabilities(validity)?;
    if (mask.batch, mask.height, mask.width) != (n, h, w) {
        return Err(Error::Invalid(format!("validity {:?} does not match logits {:?}", validity.shape(), v.shape())));
    }
    let valid = mask.count_ones();
    if valid == 0 {
        let loss = student_logits.graph().constant(Tensor::scalar(T::zero()));
        return Ok((loss, LossDiagnostics { valid_pixels: Some(0), ..Default::default() }));
    }
    let weights = mask.to_tensor::<T>().map(|m| -m / T::from_f64(valid as f64));
    let loss = student_logits.log_softmax()?.select_channel(pseudo)?.weighted_sum(&weights)?;
    let mut diag = LossDiagnostics::of(&loss);
    diag.valid_pixels = Some(valid);
    Ok((loss, diag))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub max_anchors: usize,
    pub max_positives: usize,
    pub max_negatives: usize,
    /// Base seed of the anchor / positive / negative sampling.
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.5, max_anchors: 64, max_positives: 16, max_negatives: 64, seed: 0 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("contrastive.temperature must be positive".into()));
        }
        if self.max_anchors == 0 || self.max_positives == 0 {
            return Err(Error::Config("contrastive anchor and positive caps must be positive".into()));
        }
        Ok(())
    }
}

/// Anchor, positive and negative pixel indices into the flattened
/// `B*h*w` embedding rows.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ContrastiveIndex {
    pub anchors: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

fn sample_sorted<R: Rng>(pool: &[usize], cap: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() <= cap {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), cap).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

/// Groups valid pixels by pseudo-label. A pixel is its own positive; only
/// valid pixels enter any set. Sets over the caps are subsampled.
pub fn build_contrastive_index<R: Rng>(
    labels: &[usize],
    valid: &[bool],
    config: &ContrastiveConfig,
    rng: &mut R,
) -> Result<ContrastiveIndex> {
    if labels.len() != valid.len() {
        return Err(Error::Invalid(format!("{} labels for {} validity flags", labels.len(), valid.len())));
    }
    let pool: Vec<usize> = (0..labels.len()).filter(|&i| valid[i]).collect();
    let num_classes = pool.iter().map(|&i| labels[i] + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); num_classes];
    for &i in &pool {
        by_class[labels[i]].push(i);
    }
    let anchors = sample_sorted(&pool, config.max_anchors, rng);
    let mut positives = Vec::with_capacity(anchors.len());
    let mut negatives = Vec::with_capacity(anchors.len());
    for &a in &anchors {
        positives.push(sample_sorted(&by_class[labels[a]], config.max_positives, rng));
        let others: Vec<usize> = pool.iter().copied().filter(|&k| labels[k] != labels[a]).collect();
        negatives.push(sample_sorted(&others, config.max_negatives, rng));
    }
    Ok(ContrastiveIndex { anchors, positives, negatives })
}

/// Contrastive loss on explicit index sets. `student_rows` and
/// `teacher_rows` are `[M, D]`, one row per pixel; both are L2-normalized
/// here. The result is `-1/|A| Σ_i Σ_{j∈P_i} ln(e^{s_ij} / (e^{s_ij} + Σ_{k∈N_i} e^{s_ik}))`
/// with `s = cos / τ`.
pub fn contrastive_from_index<'g, T: Scalar>(
    student_rows: Var<'g, T>,
    teacher_rows: &Tensor<T>,
    idx: &ContrastiveIndex,
    temperature: f64,
) -> Result<(Var<'g, T>, LossDiagnostics)> {
    let graph = student_rows.graph();
    let (m, d) = student_rows.value().dims2()?;
    if teacher_rows.dims2()? != (m, d) {
        return Err(Error::Invalid(format!(
            "teacher rows {:?} vs student rows [{m}, {d}]",
            teacher_rows.shape()
        )));
    }
    if idx.positives.len() != idx.anchors.len() || idx.negatives.len() != idx.anchors.len() {
        return Err(Error::Invalid("contrastive index sets have inconsistent lengths".into()));
    }
    let out_of_range = idx.anchors.iter().chain(idx.positives.iter().flatten()).chain(idx.negatives.iter().flatten());
    if let Some(&bad) = out_of_range.clone().find(|&&i| i >= m) {
        return Err(Error::Invalid(format!("contrastive index {bad} out of range for {m} rows")));
    }
    let a = idx.anchors.len();
    if a == 0 {
        let loss = graph.constant(Tensor::scalar(T::zero()));
        return Ok((loss, LossDiagnostics { anchors: Some(0), ..Default::default() }));
    }
    let inv_tau = T::from_f64(1.0 / temperature);
    let anchors = student_rows.gather_rows(&idx.anchors)?.row_normalize()?;
    let teacher = graph.constant(teacher_rows.normalize_rows()?);
    // s - 1/τ ≤ 0 keeps every exponential in (0, 1]
    let shifted = anchors.matmul_nt(teacher)?.scale(inv_tau).add_scalar(-inv_tau);
    let e = shifted.exp();
    let mut neg_mask = vec![T::zero(); a * m];
    for (i, negs) in idx.negatives.iter().enumerate() {
        for &k in negs {
            neg_mask[i * m + k] = T::one();
        }
    }
    let neg_sum = e.mul(graph.constant(Tensor::from_vec(&[a, m], neg_mask)?))?.row_sum()?;
    let mut pair_flat = Vec::new();
    let mut pair_anchor = Vec::new();
    for (i, pos) in idx.positives.iter().enumerate() {
        for &j in pos {
            pair_flat.push(i * m + j);
            pair_anchor.push(i);
        }
    }
    let mut diag = LossDiagnostics { anchors: Some(a), ..Default::default() };
    if pair_flat.is_empty() {
        let loss = graph.constant(Tensor::scalar(T::zero()));
        return Ok((loss, diag));
    }
    let s_pos = shifted.take(&pair_flat)?;
    let denom = e.take(&pair_flat)?.add(neg_sum.take(&pair_anchor)?)?;
    let log_ratio = s_pos.sub(denom.ln())?;
    let loss = log_ratio.sum().scale(-T::one() / T::from_f64(a as f64));
    diag.value = loss.value().item().to_f64_lossy();
    Ok((loss, diag))
}

/// Nearest-neighbour resampling of a batch-major per-pixel map, with source
/// index `floor((dst + 0.5) * in / out)`.
pub fn downsample_nearest<X: Copy>(
    values: &[X],
    batch: usize,
    in_size: (usize, usize),
    out_size: (usize, usize),
) -> Result<Vec<X>> {
    let (ih, iw) = in_size;
    let (oh, ow) = out_size;
    if values.len() != batch * ih * iw {
        return Err(Error::Invalid(format!("{} values for {batch}x{ih}x{iw}", values.len())));
    }
    let src = |d: usize, i: usize, o: usize| (((2 * d + 1) * i) / (2 * o)).min(i - 1);
    let mut out = Vec::with_capacity(batch * oh * ow);
    for b in 0..batch {
        for r in 0..oh {
            for c in 0..ow {
                out.push(values[(b * ih + src(r, ih, oh)) * iw + src(c, iw, ow)]);
            }
        }
    }
    Ok(out)
}

/// Pixel contrastive loss between student embeddings `[B,D,h,w]` and the
/// constant teacher embeddings, with pseudo-labels and validity given at
/// embedding resolution. `step_seed` selects the sampling stream.
pub fn contrastive_loss<'g, T: Scalar>(
    student_embedding: Var<'g, T>,
    teacher_embedding: &Tensor<T>,
    pseudo_lowres: &[usize],
    valid_lowres: &[bool],
    config: &ContrastiveConfig,
    step_seed: u64,
) -> Result<(Var<'g, T>, LossDiagnostics)> {
    let sv = student_embedding.value();
    if sv.shape() != teacher_embedding.shape() {
        return Err(Error::Invalid(format!(
            "student embedding {:?} vs teacher {:?}",
            sv.shape(),
            teacher_embedding.shape()
        )));
    }
    let (n, _, h, w) = sv.dims4()?;
    if pseudo_lowres.len() != n * h * w {
        return Err(Error::Invalid(format!("{} pseudo-labels for {n}x{h}x{w} embeddings", pseudo_lowres.len())));
    }
    let mut r = rng::stream(&[rng::tag::CONTRASTIVE, config.seed, step_seed]);
    let idx = build_contrastive_index(pseudo_lowres, valid_lowres, config, &mut r)?;
    let rows = student_embedding.nchw_to_rows()?;
    contrastive_from_index(rows, &teacher_embedding.nchw_to_rows()?, &idx, config.temperature)
}

/// `L_pseudo + L_contra`, either of which may be disabled.
pub fn unlabeled_total<'g, T: Scalar>(pseudo: Option<Var<'g, T>>, contra: Option<Var<'g, T>>) -> Result<Option<Var<'g, T>>> {
    Ok(match (pseudo, contra) {
        (Some(p), Some(c)) => Some(p.add(c)?),
        (Some(p), None) => Some(p),
        (None, Some(c)) => Some(c),
        (None, None) => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use eln_autograd::Graph;

    #[test]
    fn ce_of_uniform_prediction_is_ln_c() {
        let g = Graph::<f64>::new();
        let logits = g.param(Tensor::zeros(&[1, 4, 2, 2]));
        let (l, _) = ce_loss(logits, &[0, 1, 2, 3]).unwrap();
        assert!((l.value().item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let g = Graph::<f64>::new();
        let logits = g.param(Tensor::zeros(&[1, 2, 1, 2]));
        assert!(ce_loss(logits, &[0, 2]).is_err());
        assert!(ce_loss(logits, &[0]).is_err());
    }

    #[test]
    fn weighted_bce_balances_negatives() {
        // mask (1,1,1,0), b = 0.5 everywhere: 3 ln2 + 3 ln2 over 4 pixels
        let g = Graph::<f64>::new();
        let z = g.param(Tensor::zeros(&[1, 1, 2, 2]));
        let mask = BinaryMap::new(1, 2, 2, vec![1, 1, 1, 0]).unwrap();
        let (l, d) = weighted_bce(z, &mask).unwrap();
        assert!((l.value().item() - 6.0 * 2f64.ln() / 4.0).abs() < 1e-12);
        assert!(d.warnings.is_empty());
        let zero = BinaryMap::filled(1, 2, 2, false);
        let (l, d) = weighted_bce(z, &zero).unwrap();
        assert!((l.value().item() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(d.warnings.len(), 1);
    }

    #[test]
    fn pseudo_single_valid_pixel() {
        let g = Graph::<f64>::new();
        // two classes, student prob 0.8 on class 0
        let z = (0.8f64 / 0.2).ln();
        let logits = g.param(Tensor::from_vec(&[1, 2, 1, 2], vec![z, 0.0, 0.0, 0.0]).unwrap());
        let validity = Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, 0.49]).unwrap();
        let (l, d) = pseudo_loss(logits, &[0, 1], &validity).unwrap();
        assert!((l.value().item() + 0.8f64.ln()).abs() < 1e-12);
        assert_eq!(d.valid_pixels, Some(1));
    }

    #[test]
    fn contrastive_lone_positive_contributes_zero() {
        let g = Graph::<f64>::new();
        let rows = g.param(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let teacher = Tensor::from_vec(&[1, 2], vec![0.6, 0.8]).unwrap();
        let idx = ContrastiveIndex { anchors: vec![0], positives: vec![vec![0]], negatives: vec![vec![]] };
        let (l, _) = contrastive_from_index(rows, &teacher, &idx, 0.5).unwrap();
        assert!(l.value().item().abs() < 1e-15);
    }

    #[test]
    fn nearest_downsample_picks_centres() {
        let values: Vec<usize> = (0..16).collect();
        let out = downsample_nearest(&values, 1, (4, 4), (2, 2)).unwrap();
        // source rows/cols floor((d+0.5)*2) = 1, 3
        assert_eq!(out, vec![5, 7, 13, 15]);
    }

    #[test]
    fn index_respects_caps_and_validity() {
        let labels = vec![0, 0, 1, 1, 0, 2];
        let valid = vec![true, true, true, false, true, true];
        let cfg = ContrastiveConfig { max_anchors: 3, max_positives: 2, max_negatives: 1, ..Default::default() };
        let mut r = rng::stream(&[1]);
        let idx = build_contrastive_index(&labels, &valid, &cfg, &mut r).unwrap();
        assert_eq!(idx.anchors.len(), 3);
        for ((a, p), n) in idx.anchors.iter().zip(&idx.positives).zip(&idx.negatives) {
            assert!(valid[*a]);
            assert!(p.len() <= 2 && n.len() <= 1);
            assert!(p.iter().all(|&j| labels[j] == labels[*a] && valid[j]));
            assert!(n.iter().all(|&k| labels[k] != labels[*a] && valid[k]));
        }
    }
}
